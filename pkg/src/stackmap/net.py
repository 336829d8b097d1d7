"""HR / LR / MS segmentation networks with exact forward/backward passes.

The three variants share one layer vocabulary: zero-padded convolutions
(kernel 1/2/3/5, stride 1 or 4, dilation 1 or 2), batch normalization,
ReLU, 2x2 max pooling, nearest-neighbor 2x upsampling, center-crop skip
concatenation and a softmax head.  Everything runs on plain numpy arrays
shaped (batch, channels, height, width), float32 by default and float64
for gradient checking.  All gradients are analytic and verified against
central finite differences in the test suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import CorruptFileError, StackmapError, spec_digest
from .patches import PatchProfile

ENCODER_FILTERS = (16, 32, 64, 64, 128, 128)
DECODER_FILTERS = (128, 64, 64, 32)
N_CLASSES = 4
BN_MOMENTUM = 0.9
BN_EPS = 1e-5

VARIANTS = ("HR", "LR", "MS", "HR_all")


class NonFiniteActivation(StackmapError):
    """A layer produced NaN or Inf."""


# ---------------------------------------------------------------------------
# Layer primitives


def _same_pads(size: int, k: int, stride: int, dilation: int) -> tuple[int, int, int]:
    """TF-style SAME padding: returns (out_size, pad_before, pad_after)."""
    out = -(-size // stride)  # ceil division
    eff_k = (k - 1) * dilation + 1
    total = max((out - 1) * stride + eff_k - size, 0)
    return out, total // 2, total - total // 2


def conv_out_size(size: int, stride: int) -> int:
    return -(-size // stride)


def _im2col(x_pad: np.ndarray, k: int, stride: int, dilation: int, oh: int, ow: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N*OH*OW, C*k*k) patch matrix."""
    eff = (k - 1) * dilation + 1
    wins = sliding_window_view(x_pad, (eff, eff), axis=(2, 3))
    wins = wins[:, :, ::stride, ::stride, ::dilation, ::dilation]
    n, c = x_pad.shape[:2]
    return np.ascontiguousarray(wins.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * k * k)


def conv2d_forward(x, w, b=None, stride=1, dilation=1):
    n, c, h, wd = x.shape
    oc, ic, k, _ = w.shape
    if ic != c:
        raise StackmapError(f"conv expects {ic} input channels, got {c}")
    oh, ph0, ph1 = _same_pads(h, k, stride, dilation)
    ow, pw0, pw1 = _same_pads(wd, k, stride, dilation)
    x_pad = np.pad(x, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
    cols = _im2col(x_pad, k, stride, dilation, oh, ow)
    y = cols @ w.reshape(oc, -1).T
    if b is not None:
        y += b
    y = y.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2)
    cache = (x.shape, x_pad, w, stride, dilation, (ph0, ph1, pw0, pw1), (oh, ow))
    return np.ascontiguousarray(y), cache


def conv2d_backward(dy, cache):
    x_shape, x_pad, w, stride, dilation, pads, (oh, ow) = cache
    n, c, h, wd = x_shape
    oc, ic, k, _ = w.shape
    ph0, ph1, pw0, pw1 = pads
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(n * oh * ow, oc)
    cols = _im2col(x_pad, k, stride, dilation, oh, ow)
    dw = (dy_mat.T @ cols).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3))
    dcols = (dy_mat @ w.reshape(oc, -1)).reshape(n, oh, ow, c, k, k)
    dx_pad = np.zeros_like(x_pad)
    for i in range(k):
        for j in range(k):
            dx_pad[
                :,
                :,
                i * dilation : i * dilation + stride * oh : stride,
                j * dilation : j * dilation + stride * ow : stride,
            ] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dx_pad[:, :, ph0 : ph0 + h, pw0 : pw0 + wd]
    return np.ascontiguousarray(dx), dw, db


def batchnorm_forward(x, gamma, beta, rm, rv, train: bool, update_running: bool):
    """Per-channel normalization; train mode uses batch statistics.

    When update_running is set the running mean/variance arrays are updated
    in place with momentum BN_MOMENTUM (biased batch variance, matching the
    statistics used for normalization).
    """
    if train:
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_running:
            rm *= BN_MOMENTUM
            rm += (1.0 - BN_MOMENTUM) * mu
            rv *= BN_MOMENTUM
            rv += (1.0 - BN_MOMENTUM) * var
    else:
        mu, var = rm, rv
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, gamma, inv_std, train, x.shape)
    return y, cache


def batchnorm_backward(dy, cache):
    xhat, gamma, inv_std, train, x_shape = cache
    n, c, h, w = x_shape
    m = n * h * w
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if not train:
        dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta
    # batch statistics couple every sample of the channel
    sum_dxhat = dxhat.sum(axis=(0, 2, 3))
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
    dx = (
        dxhat
        - (sum_dxhat / m)[None, :, None, None]
        - xhat * (sum_dxhat_xhat / m)[None, :, None, None]
    ) * inv_std[None, :, None, None]
    return dx, dgamma, dbeta


def relu_forward(x):
    y = np.maximum(x, 0.0)
    return y, (x > 0.0)


def relu_backward(dy, mask):
    return dy * mask


def maxpool2_forward(x):
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    xc = x[:, :, : oh * 2, : ow * 2]
    wins = xc.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    amax = wins.argmax(axis=-1)
    y = np.take_along_axis(wins, amax[..., None], axis=-1)[..., 0]
    return y, (x.shape, amax)


def maxpool2_backward(dy, cache):
    x_shape, amax = cache
    n, c, h, w = x_shape
    oh, ow = h // 2, w // 2
    dwins = np.zeros((n, c, oh, ow, 4), dtype=dy.dtype)
    np.put_along_axis(dwins, amax[..., None], dy[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dx[:, :, : oh * 2, : ow * 2] = (
        dwins.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * 2, ow * 2)
    )
    return dx


def upsample2_forward(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3), x.shape


def upsample2_backward(dy, x_shape):
    n, c, h, w = x_shape
    return dy.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))


def center_crop(x, oh, ow):
    h, w = x.shape[2], x.shape[3]
    r0 = (h - oh) // 2
    c0 = (w - ow) // 2
    return x[:, :, r0 : r0 + oh, c0 : c0 + ow], (x.shape, r0, c0)


def center_crop_backward(dy, cache):
    x_shape, r0, c0 = cache
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dx[:, :, r0 : r0 + dy.shape[2], c0 : c0 + dy.shape[3]] = dy
    return dx


def softmax_channels(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def nearest_fusion_index(n_hr: int, sp_hr: float, n_lr: int, sp_lr: float) -> np.ndarray:
    """For each HR-bottleneck pixel, the nearest LR-bottleneck pixel.

    Both grids are co-centered; this single 1D map applies to rows and
    columns alike and realizes the crop-to-extent + nearest-resample rule.
    """
    i = np.arange(n_hr, dtype=np.float64)
    j = (i - (n_hr - 1) / 2.0) * sp_hr / sp_lr + (n_lr - 1) / 2.0
    j = np.floor(j + 0.5).astype(np.int64)
    return np.clip(j, 0, n_lr - 1)


# ---------------------------------------------------------------------------
# Declarative architecture specs


@dataclass(frozen=True)
class ConvSpec:
    name: str
    in_ch: int
    out_ch: int
    k: int
    stride: int = 1
    dilation: int = 1
    bn: bool = True
    relu: bool = True

    @property
    def bias(self) -> bool:
        # bn's shift makes a conv bias redundant; only bn-less convs carry one
        return not self.bn


@dataclass(frozen=True)
class EncoderBlock:
    name: str
    convs: tuple[ConvSpec, ...]
    pool_after: bool
    out_size_px: int  # post-convs, pre-pool
    out_spacing_um: float


@dataclass(frozen=True)
class DecoderBlock:
    name: str
    up_conv: ConvSpec
    skip_from: str | None
    convs: tuple[ConvSpec, ...]
    out_size_px: int
    out_spacing_um: float


@dataclass(frozen=True)
class NetworkSpec:
    variant: str
    profile: PatchProfile
    hr_blocks: tuple[EncoderBlock, ...]
    lr_blocks: tuple[EncoderBlock, ...]
    decoder_blocks: tuple[DecoderBlock, ...]
    head: ConvSpec
    fusion_index: tuple[int, ...] | None
    out_size_px: int
    out_spacing_um: float

    @property
    def uses_hr(self) -> bool:
        return bool(self.hr_blocks)

    @property
    def uses_lr(self) -> bool:
        return bool(self.lr_blocks)

    def all_convs(self) -> list[ConvSpec]:
        convs: list[ConvSpec] = []
        for block in (*self.hr_blocks, *self.lr_blocks):
            convs.extend(block.convs)
        for block in self.decoder_blocks:
            convs.append(block.up_conv)
            convs.extend(block.convs)
        convs.append(self.head)
        return convs

    def digest(self) -> str:
        doc = {
            "variant": self.variant,
            "profile": [
                self.profile.hr_size_px,
                self.profile.hr_spacing_um,
                self.profile.lr_size_px,
                self.profile.lr_spacing_um,
            ],
            "convs": [
                (c.name, c.in_ch, c.out_ch, c.k, c.stride, c.dilation) for c in self.all_convs()
            ],
        }
        return spec_digest(doc)

    def resolved_profile(self) -> PatchProfile:
        return replace(
            self.profile,
            label_out_size_px=self.out_size_px,
            label_out_spacing_um=self.out_spacing_um,
        )


def _encoder_blocks(prefix: str, kind: str, size: int, spacing: float, filters_per_block):
    """Build the encoder chain and its shape/spacing table."""
    blocks = []
    in_ch = 1
    n_blocks = len(filters_per_block)
    for bi, filters in enumerate(filters_per_block, start=1):
        convs = []
        for ci in range(2):
            k, stride, dilation = 3, 1, 1
            if kind == "hr" and bi == 1 and ci == 0:
                k, stride = 5, 4
            if kind == "lr" and bi > 1:
                dilation = 2
            convs.append(
                ConvSpec(f"{prefix}.b{bi}.c{ci + 1}", in_ch, filters, k, stride, dilation)
            )
            size = conv_out_size(size, stride)
            spacing *= stride
            in_ch = filters
        pool_after = bi < n_blocks
        blocks.append(EncoderBlock(f"{prefix}.b{bi}", tuple(convs), pool_after, size, spacing))
        if pool_after:
            size //= 2
            spacing *= 2
    return tuple(blocks), size, spacing


def build(
    variant: str,
    profile: PatchProfile,
    encoder_filters: tuple[int, ...] = ENCODER_FILTERS,
    decoder_filters: tuple[int, ...] = DECODER_FILTERS,
) -> NetworkSpec:
    """Construct the declarative spec for one variant under the shape rules.

    Zero-padded convs keep ceil(size/stride); pooling floors; upsampling
    doubles; skips center-crop to the decoder size.  The MS variant fuses
    the LR bottleneck onto the HR bottleneck grid by nearest sampling over
    the co-centered physical coordinates.  Custom filter stacks build the
    reduced micro-networks used for gradient verification.
    """
    if variant not in VARIANTS:
        raise StackmapError(f"unknown variant {variant!r}")
    if len(decoder_filters) > len(encoder_filters) - 1:
        raise StackmapError("need at least one more encoder block than decoder blocks")
    uses_hr = variant in ("HR", "HR_all", "MS")
    uses_lr = variant in ("LR", "MS")

    hr_blocks: tuple[EncoderBlock, ...] = ()
    lr_blocks: tuple[EncoderBlock, ...] = ()
    fusion_index = None

    if uses_hr:
        hr_blocks, hr_bneck_size, hr_bneck_spacing = _encoder_blocks(
            "enc_hr", "hr", profile.hr_size_px, profile.hr_spacing_um, encoder_filters
        )
        if hr_bneck_size < 2:
            raise StackmapError("profile too small: HR bottleneck below 2 px")
    if uses_lr:
        lr_blocks, lr_bneck_size, lr_bneck_spacing = _encoder_blocks(
            "enc_lr", "lr", profile.lr_size_px, profile.lr_spacing_um, encoder_filters
        )
        if lr_bneck_size < 2:
            raise StackmapError("profile too small: LR bottleneck below 2 px")

    if variant == "MS":
        if lr_bneck_size * lr_bneck_spacing < hr_bneck_size * hr_bneck_spacing:
            raise StackmapError("profile too small: LR bottleneck extent below HR extent")
        fusion_index = tuple(
            int(v)
            for v in nearest_fusion_index(
                hr_bneck_size, hr_bneck_spacing, lr_bneck_size, lr_bneck_spacing
            )
        )
        dec_in = encoder_filters[-1] * 2
        size, spacing = hr_bneck_size, hr_bneck_spacing
        skip_prefix = "enc_hr"
    elif variant == "LR":
        dec_in = encoder_filters[-1]
        size, spacing = lr_bneck_size, lr_bneck_spacing
        skip_prefix = "enc_lr"
    else:
        dec_in = encoder_filters[-1]
        size, spacing = hr_bneck_size, hr_bneck_spacing
        skip_prefix = "enc_hr"

    decoder = []
    in_ch = dec_in
    for di, filters in enumerate(decoder_filters, start=1):
        size *= 2
        spacing /= 2
        up_conv = ConvSpec(f"dec.b{di}.up", in_ch, filters, k=2)
        skip_block_index = len(encoder_filters) - di  # blocks 5, 4, 3, 2 at full depth
        skip_name = f"{skip_prefix}.b{skip_block_index}"
        skip_ch = encoder_filters[skip_block_index - 1]
        convs = (
            ConvSpec(f"dec.b{di}.c1", filters + skip_ch, filters, k=3),
            ConvSpec(f"dec.b{di}.c2", filters, filters, k=3),
        )
        decoder.append(DecoderBlock(f"dec.b{di}", up_conv, skip_name, convs, size, spacing))
        in_ch = filters

    head = ConvSpec("head", decoder_filters[-1], N_CLASSES, k=1, bn=False, relu=False)
    return NetworkSpec(
        variant=variant,
        profile=profile,
        hr_blocks=hr_blocks if uses_hr else (),
        lr_blocks=lr_blocks if uses_lr else (),
        decoder_blocks=tuple(decoder),
        head=head,
        fusion_index=fusion_index,
        out_size_px=size,
        out_spacing_um=spacing,
    )


def encoder_shape_table(spec: NetworkSpec, branch: str = "hr") -> list[tuple[int, float]]:
    blocks = spec.hr_blocks if branch == "hr" else spec.lr_blocks
    return [(b.out_size_px, b.out_spacing_um) for b in blocks]


def decoder_shape_table(spec: NetworkSpec) -> list[tuple[int, float]]:
    return [(b.out_size_px, b.out_spacing_um) for b in spec.decoder_blocks]


def receptive_field(spec: NetworkSpec, layer: str) -> tuple[int, float]:
    """Analytic receptive field of a named encoder conv at the branch input."""
    if layer.startswith("enc_hr"):
        blocks, spacing = spec.hr_blocks, spec.profile.hr_spacing_um
    elif layer.startswith("enc_lr"):
        blocks, spacing = spec.lr_blocks, spec.profile.lr_spacing_um
    else:
        raise StackmapError(f"receptive field defined for encoder layers, not {layer!r}")
    chain = []
    found = False
    for block in blocks:
        for conv in block.convs:
            chain.append((conv.k, conv.stride, conv.dilation))
            if conv.name == layer:
                found = True
                break
        if found:
            break
        if block.pool_after:
            chain.append((2, 2, 1))
    if not found:
        raise StackmapError(f"no encoder conv named {layer!r}")
    px = compose_receptive_field(chain)
    return px, px * spacing


def compose_receptive_field(chain: list[tuple[int, int, int]]) -> int:
    """Compose (kernel, stride, dilation) stages into an input-domain extent."""
    rf, jump = 1, 1
    for k, stride, dilation in chain:
        eff_k = (k - 1) * dilation + 1
        rf += (eff_k - 1) * jump
        jump *= stride
    return rf


# ---------------------------------------------------------------------------
# Parameters


LEARNABLE_SUFFIXES = (".w", ".b", ".bn.gamma", ".bn.beta")


@dataclass
class NetworkParams:
    """Flat tensor store for one variant: weights, bn affine and running stats."""

    tensors: dict[str, np.ndarray]
    spec_hash: str
    initializer: str
    seed: int
    dtype: np.dtype

    def learnable_keys(self) -> list[str]:
        return [k for k in self.tensors if k.endswith(LEARNABLE_SUFFIXES)]

    def decayable_keys(self) -> list[str]:
        return [k for k in self.tensors if k.endswith(".w")]

    def bn_replica(self) -> "NetworkParams":
        """Share weights, copy running statistics (one replica per worker)."""
        tensors = dict(self.tensors)
        for k in list(tensors):
            if k.endswith((".bn.rm", ".bn.rv")):
                tensors[k] = tensors[k].copy()
        return NetworkParams(tensors, self.spec_hash, self.initializer, self.seed, self.dtype)

    def astype(self, dtype) -> "NetworkParams":
        dt = np.dtype(dtype)
        return NetworkParams(
            {k: v.astype(dt) for k, v in self.tensors.items()},
            self.spec_hash,
            self.initializer,
            self.seed,
            dt,
        )


def init_params(
    spec: NetworkSpec, seed: int = 0, dtype=np.float32, initializer: str = "he_uniform"
) -> NetworkParams:
    """He-uniform conv weights, zero biases, identity batch norm; seeded."""
    if initializer != "he_uniform":
        raise StackmapError(f"unknown initializer {initializer!r}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    dt = np.dtype(dtype)
    tensors: dict[str, np.ndarray] = {}
    for conv in spec.all_convs():
        fan_in = conv.in_ch * conv.k * conv.k
        bound = np.sqrt(6.0 / fan_in)
        shape = (conv.out_ch, conv.in_ch, conv.k, conv.k)
        tensors[conv.name + ".w"] = rng.uniform(-bound, bound, size=shape).astype(dt)
        if conv.bias:
            tensors[conv.name + ".b"] = np.zeros(conv.out_ch, dtype=dt)
        if conv.bn:
            tensors[conv.name + ".bn.gamma"] = np.ones(conv.out_ch, dtype=dt)
            tensors[conv.name + ".bn.beta"] = np.zeros(conv.out_ch, dtype=dt)
            tensors[conv.name + ".bn.rm"] = np.zeros(conv.out_ch, dtype=dt)
            tensors[conv.name + ".bn.rv"] = np.ones(conv.out_ch, dtype=dt)
    return NetworkParams(tensors, spec.digest(), initializer, seed, dt)


# ---------------------------------------------------------------------------
# Forward / backward


def _check_finite(name: str, x: np.ndarray):
    if not np.isfinite(x).all():
        raise NonFiniteActivation(f"non-finite activation after layer {name}")


def _run_conv_unit(x, conv: ConvSpec, params: NetworkParams, train: bool, bn_frozen: bool, tape):
    t = params.tensors
    bias = t[conv.name + ".b"] if conv.bias else None
    y, c_cache = conv2d_forward(x, t[conv.name + ".w"], bias, conv.stride, conv.dilation)
    tape.append(("conv", conv.name, c_cache))
    if conv.bn:
        y, b_cache = batchnorm_forward(
            y,
            t[conv.name + ".bn.gamma"],
            t[conv.name + ".bn.beta"],
            t[conv.name + ".bn.rm"],
            t[conv.name + ".bn.rv"],
            train=train and not bn_frozen,
            update_running=train and not bn_frozen,
        )
        tape.append(("bn", conv.name, b_cache))
    if conv.relu:
        y, mask = relu_forward(y)
        tape.append(("relu", conv.name, mask))
    _check_finite(conv.name, y)
    return y


def _run_encoder(x, blocks, params, train, bn_frozen, tape, skips):
    for bi, block in enumerate(blocks):
        for conv in block.convs:
            x = _run_conv_unit(x, conv, params, train, bn_frozen, tape)
        skips[block.name] = x
        if block.pool_after:
            x, p_cache = maxpool2_forward(x)
            tape.append(("pool", block.name, p_cache))
    return x


@dataclass
class ForwardCache:
    tape: list
    skips: dict
    logits: np.ndarray
    fusion: tuple | None
    bneck_concat: tuple | None  # (hr_channels,) for MS split
    train: bool


def forward(
    spec: NetworkSpec,
    params: NetworkParams,
    hr: np.ndarray | None,
    lr: np.ndarray | None = None,
    mode: str = "eval",
    bn_frozen: bool = False,
    want_cache: bool = False,
):
    """Run one variant; returns (class probabilities, cache | None).

    Train mode normalizes with batch statistics and updates the running
    stats held in `params` (momentum 0.9); eval mode uses running stats and
    is deterministic.  `bn_frozen` keeps running statistics fixed while
    still recording a backward-capable tape.
    """
    if mode not in ("train", "eval"):
        raise StackmapError(f"unknown mode {mode!r}")
    train = mode == "train"
    if spec.uses_hr and hr is None:
        raise StackmapError("variant requires an HR input")
    if spec.uses_lr and lr is None:
        raise StackmapError("variant requires an LR input")

    def _validate(x, size, label):
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != size or x.shape[3] != size:
            raise StackmapError(
                f"{label} input must be (batch, 1, {size}, {size}); got {x.shape}"
            )

    tape: list = []
    skips: dict = {}
    fusion_cache = None
    bneck_concat = None

    if spec.uses_hr:
        _validate(hr, spec.profile.hr_size_px, "HR")
        x_hr = _run_encoder(hr, spec.hr_blocks, params, train, bn_frozen, tape, skips)
    if spec.uses_lr:
        _validate(lr, spec.profile.lr_size_px, "LR")
        x_lr = _run_encoder(lr, spec.lr_blocks, params, train, bn_frozen, tape, skips)

    if spec.variant == "MS":
        idx = np.asarray(spec.fusion_index, dtype=np.int64)
        fused = x_lr[:, :, idx[:, None], idx[None, :]]
        fusion_cache = (x_lr.shape, idx)
        bneck_concat = (x_hr.shape[1],)
        x = np.concatenate([x_hr, fused], axis=1)
    elif spec.variant == "LR":
        x = x_lr
    else:
        x = x_hr

    for block in spec.decoder_blocks:
        x, u_cache = upsample2_forward(x)
        tape.append(("up", block.name, u_cache))
        x = _run_conv_unit(x, block.up_conv, params, train, bn_frozen, tape)
        skip = skips[block.skip_from]
        cropped, crop_cache = center_crop(skip, x.shape[2], x.shape[3])
        tape.append(("concat", block.name, (block.skip_from, crop_cache, x.shape[1])))
        x = np.concatenate([x, cropped], axis=1)
        for conv in block.convs:
            x = _run_conv_unit(x, conv, params, train, bn_frozen, tape)

    logits, h_cache = conv2d_forward(
        x, params.tensors["head.w"], params.tensors["head.b"], 1, 1
    )
    tape.append(("conv", "head", h_cache))
    _check_finite("head", logits)
    probs = softmax_channels(logits)

    if not want_cache:
        return probs, None
    return probs, ForwardCache(tape, skips, logits, fusion_cache, bneck_concat, train)


def backward(spec: NetworkSpec, params: NetworkParams, cache: ForwardCache, dlogits: np.ndarray):
    """Walk the forward tape in reverse; returns gradients for learnable keys."""
    if cache is None:
        raise StackmapError("stale cache: forward was run without want_cache")
    grads: dict[str, np.ndarray] = {}
    skip_grads: dict[str, np.ndarray] = {}
    tape = list(cache.tape)
    dx = dlogits

    def pop(expected_op):
        op, name, data = tape.pop()
        if op != expected_op:
            raise StackmapError(f"stale cache: expected {expected_op}, found {op}")
        return name, data

    # head
    name, c_cache = pop("conv")
    dx, dw, db = conv2d_backward(dx, c_cache)
    grads["head.w"] = dw
    grads["head.b"] = db

    def conv_unit_backward(dx, conv: ConvSpec):
        nonlocal tape
        if conv.relu:
            _, mask = pop("relu")
            dx = relu_backward(dx, mask)
        if conv.bn:
            _, b_cache = pop("bn")
            dx, dgamma, dbeta = batchnorm_backward(dx, b_cache)
            grads[conv.name + ".bn.gamma"] = dgamma
            grads[conv.name + ".bn.beta"] = dbeta
        _, c_cache = pop("conv")
        dx, dw, db = conv2d_backward(dx, c_cache)
        grads[conv.name + ".w"] = dw
        if conv.bias:
            grads[conv.name + ".b"] = db
        return dx

    # decoder, reversed
    for block in reversed(spec.decoder_blocks):
        for conv in reversed(block.convs):
            dx = conv_unit_backward(dx, conv)
        _, (skip_name, crop_cache, main_ch) = pop("concat")
        d_main, d_skip = dx[:, :main_ch], dx[:, main_ch:]
        d_skip_full = center_crop_backward(d_skip, crop_cache)
        skip_grads[skip_name] = skip_grads.get(skip_name, 0) + d_skip_full
        dx = conv_unit_backward(d_main, block.up_conv)
        _, u_cache = pop("up")
        dx = upsample2_backward(dx, u_cache)

    # split bottleneck gradient per variant
    if spec.variant == "MS":
        hr_ch = cache.bneck_concat[0]
        d_hr_bneck = dx[:, :hr_ch]
        d_fused = dx[:, hr_ch:]
        lr_shape, idx = cache.fusion
        d_lr_bneck = np.zeros(lr_shape, dtype=dx.dtype)
        np.add.at(d_lr_bneck, (slice(None), slice(None), idx[:, None], idx[None, :]), d_fused)
    elif spec.variant == "LR":
        d_lr_bneck = dx
    else:
        d_hr_bneck = dx

    def encoder_backward(blocks, d_bneck):
        d = d_bneck
        for bi, block in enumerate(reversed(blocks)):
            if block.pool_after:
                _, p_cache = pop("pool")
                d = maxpool2_backward(d, p_cache)
            extra = skip_grads.get(block.name)
            if extra is not None:
                d = d + extra
            for conv in reversed(block.convs):
                d = conv_unit_backward(d, conv)
        return d

    # tape order: hr encoder, then lr encoder, then decoder — pop lr first
    if spec.uses_lr:
        encoder_backward(spec.lr_blocks, d_lr_bneck)
    if spec.uses_hr:
        encoder_backward(spec.hr_blocks, d_hr_bneck)
    if tape:
        raise StackmapError("stale cache: tape not fully consumed")
    return grads


# ---------------------------------------------------------------------------
# Parameter file: JSON header + raw little-endian payload per tensor

_PARAMS_MAGIC = b"SMNP"


def save_params(params: NetworkParams, path: Path | str) -> None:
    order = sorted(params.tensors)
    header = {
        "spec_hash": params.spec_hash,
        "initializer": params.initializer,
        "seed": params.seed,
        "dtype": np.dtype(params.dtype).name,
        "tensors": [{"name": k, "shape": list(params.tensors[k].shape)} for k in order],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_PARAMS_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for k in order:
            arr = params.tensors[k]
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_params(path: Path | str) -> NetworkParams:
    with open(path, "rb") as fh:
        if fh.read(4) != _PARAMS_MAGIC:
            raise CorruptFileError(f"{path}: bad magic")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        dt = np.dtype(header["dtype"]).newbyteorder("<")
        tensors = {}
        for entry in header["tensors"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = fh.read(count * dt.itemsize)
            if len(raw) != count * dt.itemsize:
                raise CorruptFileError(f"{path}: truncated payload at {entry['name']}")
            tensors[entry["name"]] = (
                np.frombuffer(raw, dtype=dt).reshape(entry["shape"]).astype(header["dtype"])
            )
        if fh.read(1):
            raise CorruptFileError(f"{path}: trailing bytes after payload")
    return NetworkParams(
        tensors,
        header["spec_hash"],
        header["initializer"],
        int(header["seed"]),
        np.dtype(header["dtype"]),
    )
