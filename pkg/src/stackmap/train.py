"""SGD with Nesterov momentum, the step schedule, and data-parallel training.

One training run binds a network variant to a pair of annotated sections.
The data-parallel contract: n workers hold replicas sharing weight tensors
but with worker-local batch-norm statistics; per-iteration gradients are
arithmetic means across workers, followed by one synchronized step; the
learning rate scales linearly with the worker count.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import net
from .core import DatasetManifest, StackmapError
from .patches import PatchProfile, make_training_stream
from .segment import IntervalModel

EPS_PROB = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    base_lr: float = 0.01
    lr_boundaries: tuple[int, ...] = (1000, 1400, 1800, 2200, 2600)
    lr_factor: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 0.0001
    batch_per_worker: int = 16
    n_workers: int = 1
    seed: int = 0
    aug_on: bool = True
    bn_frozen: bool = False
    queue_capacity: int = 8
    stream_workers: int = 1
    max_dist_mm: float = 5.0

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.lr_boundaries, self.lr_boundaries[1:])):
            raise StackmapError("lr boundaries must be strictly increasing")
        if self.lr_boundaries and self.lr_boundaries[-1] >= self.iterations:
            raise StackmapError("lr boundaries must lie before the final iteration")
        if self.base_lr <= 0 or self.lr_factor <= 0:
            raise StackmapError("rates must be positive")
        if self.n_workers < 1 or self.batch_per_worker < 1:
            raise StackmapError("need at least one worker and one patch per worker")


# CPU-tractable default for the synthetic desk stacks.
DESK_TRAIN = TrainConfig(
    iterations=300,
    lr_boundaries=(100, 140, 180, 220, 260),
    batch_per_worker=8,
)


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    """Step schedule with linear worker scaling."""
    if not 0 <= iteration < cfg.iterations:
        raise StackmapError(f"iteration {iteration} outside [0, {cfg.iterations})")
    drops = sum(1 for b in cfg.lr_boundaries if b <= iteration)
    return cfg.base_lr * (cfg.lr_factor**drops) * cfg.n_workers


def loss(
    probs: np.ndarray,
    labels: np.ndarray,
    params: net.NetworkParams | None = None,
    weight_decay: float = 0.0,
) -> tuple[float, np.ndarray]:
    """Mean per-pixel cross-entropy plus L2 on conv weights.

    Returns the scalar loss and the gradient with respect to the logits
    feeding the softmax; biases and batch-norm affine terms are excluded
    from the decay term.
    """
    n, c, h, w = probs.shape
    if labels.shape != (n, h, w):
        raise StackmapError(f"labels {labels.shape} do not match output grid {(n, h, w)}")
    m = n * h * w
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, labels[:, None].astype(np.int64), 1.0, axis=1)
    picked = np.take_along_axis(probs, labels[:, None].astype(np.int64), axis=1)
    ce = float(-np.log(np.maximum(picked, EPS_PROB)).sum() / m)
    dlogits = (probs - onehot) / m
    total = ce
    if params is not None and weight_decay > 0.0:
        total += 0.5 * weight_decay * sum(
            float(np.square(params.tensors[k]).sum()) for k in params.decayable_keys()
        )
    return total, dlogits


def add_weight_decay(
    grads: dict[str, np.ndarray], params: net.NetworkParams, weight_decay: float
) -> None:
    """In-place: grad += weight_decay * w for every conv weight tensor."""
    if weight_decay <= 0.0:
        return
    for k in params.decayable_keys():
        grads[k] = grads[k] + weight_decay * params.tensors[k]


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    iteration: int = 0

    @classmethod
    def for_params(cls, params: net.NetworkParams) -> "OptimizerState":
        return cls({k: np.zeros_like(params.tensors[k]) for k in params.learnable_keys()})


def step(
    params: net.NetworkParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    momentum: float,
) -> None:
    """Nesterov update: v <- mu*v - lr*g; w <- w + mu*v - lr*g.  In place."""
    for k in params.learnable_keys():
        g = grads[k]
        if not np.isfinite(g).all():
            raise StackmapError(f"non-finite gradient for {k} at iteration {state.iteration}")
        v = state.velocity[k]
        v *= momentum
        v -= lr * g
        params.tensors[k] += momentum * v - lr * g
    state.iteration += 1


def mean_gradients(per_worker: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Arithmetic mean across workers, in fixed worker order."""
    keys = per_worker[0].keys()
    out = {}
    for k in keys:
        acc = per_worker[0][k].copy()
        for g in per_worker[1:]:
            acc += g[k]
        out[k] = acc / len(per_worker)
    return out


def _worker_pass(spec, replica, hr, lr, labels, weight_decay, bn_frozen):
    probs, cache = net.forward(
        spec, replica, hr, lr, mode="train", bn_frozen=bn_frozen, want_cache=True
    )
    ce, dlogits = loss(probs, labels)
    grads = net.backward(spec, replica, cache, dlogits)
    return ce, grads


def train_local_model(
    dataset: DatasetManifest,
    s1: int,
    s2: int,
    area: str,
    variant: str,
    profile: PatchProfile,
    cfg: TrainConfig,
    training_sections: list[int] | None = None,
    progress=None,
) -> tuple[IntervalModel, list[dict]]:
    """Train one local model on the pair (s1, s2); returns model and loss log.

    `training_sections` widens the sampled sections (the all-sections
    protocol trains one model per area on the union of pair sections);
    the model identity stays bound to (s1, s2).
    """
    if s1 >= s2:
        raise StackmapError("need s1 < s2")
    sections = training_sections if training_sections is not None else [s1, s2]
    for s in sections:
        if not dataset.has_label(s):
            raise StackmapError(f"section {s} has no labels")

    spec = net.build(variant, profile)
    resolved = spec.resolved_profile()
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    params = net.init_params(spec, seed=cfg.seed)
    replicas = [params if w == 0 else params.bn_replica() for w in range(cfg.n_workers)]
    state = OptimizerState.for_params(params)
    log: list[dict] = []

    stream = make_training_stream(
        dataset,
        sections,
        resolved,
        batch_size=cfg.batch_per_worker * cfg.n_workers,
        aug_on=cfg.aug_on,
        queue_capacity=cfg.queue_capacity,
        n_workers=cfg.stream_workers,
        seed=int(seeds[1].generate_state(1)[0]),
        max_dist_mm=cfg.max_dist_mm,
    )
    pool = ThreadPoolExecutor(cfg.n_workers) if cfg.n_workers > 1 else None
    try:
        for it in range(cfg.iterations):
            t0 = time.perf_counter()
            hr, lr_in, labels = next(stream)
            shards = []
            for w in range(cfg.n_workers):
                sl = slice(w * cfg.batch_per_worker, (w + 1) * cfg.batch_per_worker)
                shards.append((hr[sl], lr_in[sl] if lr_in is not None else None, labels[sl]))
            if pool is None:
                results = [
                    _worker_pass(spec, replicas[0], *shards[0], cfg.weight_decay, cfg.bn_frozen)
                ]
            else:
                futures = [
                    pool.submit(
                        _worker_pass, spec, replicas[w], *shards[w], cfg.weight_decay, cfg.bn_frozen
                    )
                    for w in range(cfg.n_workers)
                ]
                results = [f.result() for f in futures]
            ce = float(np.mean([r[0] for r in results]))
            if not np.isfinite(ce):
                raise StackmapError(f"non-finite loss at iteration {it}")
            grads = mean_gradients([r[1] for r in results])
            add_weight_decay(grads, params, cfg.weight_decay)
            rate = lr_at(cfg, it)
            step(params, grads, state, rate, cfg.momentum)
            wd_term = 0.5 * cfg.weight_decay * sum(
                float(np.square(params.tensors[k]).sum()) for k in params.decayable_keys()
            )
            log.append(
                {
                    "iter": it,
                    "lr": rate,
                    "loss": ce + wd_term,
                    "wall_ms": (time.perf_counter() - t0) * 1000.0,
                }
            )
            if progress is not None:
                progress((it + 1) / cfg.iterations)
    finally:
        stream.close()
        if pool is not None:
            pool.shutdown(wait=False)

    model = IntervalModel(
        area=area,
        s1=s1,
        s2=s2,
        variant=variant,
        profile=resolved,
        params=replicas[0],
        metadata={
            "iterations": cfg.iterations,
            "seed": cfg.seed,
            "n_workers": cfg.n_workers,
            "training_sections": list(sections),
        },
    )
    return model, log
