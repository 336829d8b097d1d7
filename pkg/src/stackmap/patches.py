"""Proximity-constrained patch sampling, co-centered HR/LR extraction, augmentation.

Training patches are only drawn near the target area: eligible center pixels
lie within a physical distance of the nearest area-labeled pixel.  HR and LR
patches share one physical center; resampling is area-weighted averaging for
images and nearest-neighbor for labels.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .core import DatasetManifest, LabelClass, LabelMap, SectionImage, StackmapError


@dataclass(frozen=True)
class PatchProfile:
    """Co-centered HR/LR patch geometry plus the derived label output grid.

    The label grid fields are filled in from the network shape rules
    (see net.build); they stay None until a variant is chosen.
    """

    hr_size_px: int
    hr_spacing_um: float
    lr_size_px: int
    lr_spacing_um: float
    label_out_size_px: int | None = None
    label_out_spacing_um: float | None = None

    def __post_init__(self):
        if min(self.hr_size_px, self.lr_size_px) < 1:
            raise StackmapError("patch sizes must be positive")
        if min(self.hr_spacing_um, self.lr_spacing_um) <= 0:
            raise StackmapError("patch spacings must be positive")
        if self.hr_extent_um >= self.lr_extent_um:
            raise StackmapError("HR physical extent must be smaller than LR extent")

    @property
    def hr_extent_um(self) -> float:
        return self.hr_size_px * self.hr_spacing_um

    @property
    def lr_extent_um(self) -> float:
        return self.lr_size_px * self.lr_spacing_um


# HR 2025 px at 2 um and LR 682 px at 16 um; full-scale geometry.
CANONICAL_PROFILE = PatchProfile(2025, 2.0, 682, 16.0)
# CPU-tractable geometry for the synthetic desk stacks (16 um sections).
DESK_PROFILE = PatchProfile(253, 16.0, 85, 128.0)

PROFILES = {"canonical": CANONICAL_PROFILE, "desk": DESK_PROFILE}


@dataclass(frozen=True)
class AugmentParams:
    """One draw of the augmentation parameters applied to a patch pair."""

    coarse_quarter_turns: int = 0
    fine_rotation_deg: float = 0.0
    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.coarse_quarter_turns not in (0, 1, 2, 3):
            raise StackmapError("coarse rotation must be a quarter-turn count 0..3")
        if not -45.0 <= self.fine_rotation_deg <= 45.0:
            raise StackmapError("fine rotation out of [-45, 45]")
        if not 0.9 <= self.alpha <= 1.1:
            raise StackmapError("alpha out of [0.9, 1.1]")
        if not -0.2 <= self.beta <= 0.2:
            raise StackmapError("beta out of [-0.2, 0.2]")
        if not 0.8 <= self.gamma <= 1.214:
            raise StackmapError("gamma out of [0.8, 1.214]")


def draw_augment_params(rng: np.random.Generator, coarse_quarter_turns: int = 0) -> AugmentParams:
    return AugmentParams(
        coarse_quarter_turns=coarse_quarter_turns,
        fine_rotation_deg=float(rng.uniform(-45.0, 45.0)),
        alpha=float(rng.uniform(0.9, 1.1)),
        beta=float(rng.uniform(-0.2, 0.2)),
        gamma=float(rng.uniform(0.8, 1.214)),
    )


def eligible_center_mask(labels: LabelMap, max_dist_mm: float = 5.0) -> np.ndarray:
    """Pixels within max_dist_mm of the nearest area pixel (Euclidean, physical)."""
    area = labels.labels == LabelClass.AREA
    if not area.any():
        raise StackmapError("empty target: label map has no area pixels")
    dist_um = ndimage.distance_transform_edt(
        ~area, sampling=(labels.spacing_um, labels.spacing_um)
    )
    return dist_um <= max_dist_mm * 1000.0


def sample_centers(
    labels: LabelMap, max_dist_mm: float = 5.0, n: int = 1, seed: int = 0
) -> list[tuple[int, int]]:
    """Draw n (row, col) centers uniformly with replacement from the eligible set."""
    if n < 1:
        raise StackmapError("need n >= 1 centers")
    mask = eligible_center_mask(labels, max_dist_mm)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise StackmapError("eligible center set is empty")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, rows.size, size=n)
    return [(int(rows[i]), int(cols[i])) for i in picks]


def _overlap_weights(
    n_out: int, sp_out: float, n_in: int, sp_in: float, start_um: float
) -> np.ndarray:
    """1D area-overlap weight matrix (n_out, n_in); rows sum to in-bounds coverage."""
    w = np.zeros((n_out, n_in), dtype=np.float64)
    t = np.arange(n_out, dtype=np.float64)
    a = start_um + t * sp_out
    b = a + sp_out
    s0 = np.floor(a / sp_in).astype(np.int64)
    band = int(np.ceil(sp_out / sp_in)) + 1
    rows = np.arange(n_out)
    for k in range(band + 1):
        s = s0 + k
        lo = np.maximum(a, s * sp_in)
        hi = np.minimum(b, (s + 1) * sp_in)
        ov = np.clip(hi - lo, 0.0, None) / sp_out
        valid = (s >= 0) & (s < n_in) & (ov > 0)
        w[rows[valid], s[valid]] += ov[valid]
    # snap near-0/1 weights so aligned identity resampling is an exact crop
    w[w < 1e-9] = 0.0
    w[np.abs(w - 1.0) < 1e-9] = 1.0
    return w


def extract_patch(
    section: SectionImage,
    center_um: tuple[float, float],
    size_px: int,
    spacing_um: float,
    fill: float = 1.0,
) -> np.ndarray:
    """Resample a square patch centered at center_um (x, y in physical um).

    Area-weighted averaging onto the requested grid; regions outside the
    section are filled with the bright-background constant.
    """
    if spacing_um < section.spacing_um - 1e-9:
        raise StackmapError("upsampling not supported: requested spacing below source spacing")
    cx, cy = center_um
    extent = size_px * spacing_um
    wy = _overlap_weights(size_px, spacing_um, section.height, section.spacing_um, cy - extent / 2)
    wx = _overlap_weights(size_px, spacing_um, section.width, section.spacing_um, cx - extent / 2)
    img = section.intensities.astype(np.float64)
    patch = wy @ img @ wx.T
    coverage = np.outer(wy.sum(axis=1), wx.sum(axis=1))
    patch = patch + (1.0 - coverage) * fill
    return np.clip(patch, 0.0, 1.0).astype(np.float32)


def extract_label_patch(
    labels: LabelMap, center_um: tuple[float, float], size_px: int, spacing_um: float
) -> np.ndarray:
    """Nearest-neighbor label patch on the output grid; outside pixels become bg."""
    cx, cy = center_um
    extent = size_px * spacing_um
    t = (np.arange(size_px, dtype=np.float64) + 0.5) * spacing_um
    src_rows = np.floor((cy - extent / 2 + t) / labels.spacing_um).astype(np.int64)
    src_cols = np.floor((cx - extent / 2 + t) / labels.spacing_um).astype(np.int64)
    out = np.zeros((size_px, size_px), dtype=np.uint8)
    rv = (src_rows >= 0) & (src_rows < labels.height)
    cv = (src_cols >= 0) & (src_cols < labels.width)
    rr = np.clip(src_rows, 0, labels.height - 1)
    cc = np.clip(src_cols, 0, labels.width - 1)
    vals = labels.labels[np.ix_(rr, cc)]
    out[np.ix_(rv, cv)] = vals[np.ix_(rv, cv)]
    return out


def _rotate_image(arr: np.ndarray, params: AugmentParams, order: int, cval: float) -> np.ndarray:
    out = np.rot90(arr, k=params.coarse_quarter_turns)
    if params.fine_rotation_deg != 0.0:
        out = ndimage.rotate(
            out, params.fine_rotation_deg, reshape=False, order=order, mode="constant", cval=cval
        )
    return np.ascontiguousarray(out)


def augment(
    hr: np.ndarray, lr: np.ndarray, label: np.ndarray, params: AugmentParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rotate all three about their common center, then remap intensities.

    Images use bilinear resampling with bright fill; labels use nearest
    neighbor with bg fill and receive no intensity change.  The same
    f(x) = alpha * x^gamma + beta applies to every pixel of both images,
    clamped back to [0, 1].
    """
    hr2 = _rotate_image(hr, params, order=1, cval=1.0)
    lr2 = _rotate_image(lr, params, order=1, cval=1.0)
    lab2 = _rotate_image(label, params, order=0, cval=float(LabelClass.BG))
    for img in (hr2, lr2):
        np.clip(img, 0.0, 1.0, out=img)
    hr2 = np.clip(params.alpha * np.power(hr2, params.gamma) + params.beta, 0.0, 1.0)
    lr2 = np.clip(params.alpha * np.power(lr2, params.gamma) + params.beta, 0.0, 1.0)
    return hr2.astype(np.float32), lr2.astype(np.float32), lab2.astype(np.uint8)


class _SectionData:
    """Per-section state shared by all producer workers (read-only)."""

    def __init__(self, image: SectionImage, labels: LabelMap, max_dist_mm: float):
        self.image = image
        self.labels = labels
        mask = eligible_center_mask(labels, max_dist_mm)
        self.rows, self.cols = np.nonzero(mask)
        if self.rows.size == 0:
            raise StackmapError("eligible center set is empty")


class PatchStream:
    """Bounded producer/consumer stream of (hr, lr, label) training batches.

    Producers sample centers, extract and augment patches, and push batches
    through a bounded queue; the first producer error closes the queue and is
    re-raised on the consumer side.  With one worker and a fixed seed the
    batch sequence is fully deterministic.
    """

    def __init__(
        self,
        dataset: DatasetManifest,
        training_sections: list[int],
        profile: PatchProfile,
        batch_size: int,
        aug_on: bool = True,
        queue_capacity: int = 8,
        n_workers: int = 1,
        seed: int = 0,
        max_dist_mm: float = 5.0,
    ):
        if n_workers < 1:
            raise StackmapError("need at least one producer worker")
        if profile.label_out_size_px is None or profile.label_out_spacing_um is None:
            raise StackmapError("profile lacks a label output grid; resolve it via net.build")
        self.profile = profile
        self.batch_size = batch_size
        self.aug_on = aug_on
        self.coarse_turns = dataset.coarse_rotation_quarter_turns
        self._sections = []
        for s in training_sections:
            if not dataset.has_label(s):
                raise StackmapError(f"training section {s} has no labels")
            self._sections.append(
                _SectionData(dataset.load_section_image(s), dataset.load_label_map(s), max_dist_mm)
            )
        self._queue: queue.Queue = queue.Queue(maxsize=queue_capacity)
        self._stop = threading.Event()
        self._error: BaseException | None = None
        seeds = np.random.SeedSequence(seed).spawn(n_workers)
        self._threads = [
            threading.Thread(target=self._produce, args=(np.random.default_rng(sq),), daemon=True)
            for sq in seeds
        ]
        for t in self._threads:
            t.start()

    def _make_one(self, rng: np.random.Generator):
        sec = self._sections[int(rng.integers(0, len(self._sections)))]
        i = int(rng.integers(0, sec.rows.size))
        row, col = int(sec.rows[i]), int(sec.cols[i])
        sp = sec.labels.spacing_um
        center = ((col + 0.5) * sp, (row + 0.5) * sp)
        p = self.profile
        hr = extract_patch(sec.image, center, p.hr_size_px, p.hr_spacing_um)
        lr = extract_patch(sec.image, center, p.lr_size_px, p.lr_spacing_um)
        lab = extract_label_patch(sec.labels, center, p.label_out_size_px, p.label_out_spacing_um)
        if self.aug_on:
            hr, lr, lab = augment(hr, lr, lab, draw_augment_params(rng, self.coarse_turns))
        elif self.coarse_turns:
            fixed = AugmentParams(coarse_quarter_turns=self.coarse_turns)
            hr, lr, lab = augment(hr, lr, lab, fixed)
        return hr, lr, lab

    def _produce(self, rng: np.random.Generator):
        try:
            while not self._stop.is_set():
                hrs, lrs, labs = [], [], []
                for _ in range(self.batch_size):
                    hr, lr, lab = self._make_one(rng)
                    hrs.append(hr)
                    lrs.append(lr)
                    labs.append(lab)
                batch = (
                    np.stack(hrs)[:, None, :, :],
                    np.stack(lrs)[:, None, :, :],
                    np.stack(labs),
                )
                while not self._stop.is_set():
                    try:
                        self._queue.put(batch, timeout=0.1)
                        break
                    except queue.Full:
                        continue
        except BaseException as exc:  # first error closes the stream
            self._error = exc
            self._stop.set()

    def __iter__(self):
        return self

    def __next__(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        while True:
            if self._error is not None:
                raise StackmapError(f"patch producer failed: {self._error}") from self._error
            if self._stop.is_set():
                raise StopIteration
            try:
                return self._queue.get(timeout=0.1)
            except queue.Empty:
                continue

    def close(self):
        self._stop.set()
        while True:
            try:
                self._queue.get_nowait()
            except queue.Empty:
                break
        for t in self._threads:
            t.join(timeout=5.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def make_training_stream(
    dataset: DatasetManifest,
    training_sections: list[int],
    profile: PatchProfile,
    batch_size: int,
    aug_on: bool = True,
    queue_capacity: int = 8,
    n_workers: int = 1,
    seed: int = 0,
    max_dist_mm: float = 5.0,
) -> PatchStream:
    return PatchStream(
        dataset,
        training_sections,
        profile,
        batch_size,
        aug_on=aug_on,
        queue_capacity=queue_capacity,
        n_workers=n_workers,
        seed=seed,
        max_dist_mm=max_dist_mm,
    )
