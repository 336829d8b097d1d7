"""Interval planning, ROI projection, and full-section tiled inference.

The stack is partitioned into section intervals bounded by consecutive
training sections; each interval gets one local model, and the end
intervals extrapolate with the nearest model.  Inference slides the
network over tiles whose centers lie inside a region of interest
projected from the closest reference, averaging overlapping logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import net
from .core import DatasetManifest, LabelClass, LabelMap, SectionImage, StackmapError
from .patches import PatchProfile, extract_patch


@dataclass(frozen=True)
class IntervalModel:
    """Trained parameters bound to one (s1, s2, area) training pair."""

    area: str
    s1: int
    s2: int
    variant: str
    profile: PatchProfile
    params: net.NetworkParams
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.s1 >= self.s2:
            raise StackmapError("interval model needs s1 < s2")
        spec = net.build(self.variant, self.profile)
        if spec.digest() != self.params.spec_hash:
            raise StackmapError("params are incompatible with variant/profile")

    @property
    def key(self) -> tuple[int, int]:
        return (self.s1, self.s2)

    def spec(self) -> net.NetworkSpec:
        return net.build(self.variant, self.profile)


@dataclass(frozen=True)
class MappingPlan:
    """Partition of a stack range into intervals with model assignments.

    Intervals are half-open [start, stop) in section indices; the suffix
    interval's stop is last+1 so the partition covers [first, last]
    exactly once.
    """

    area: str
    first: int
    last: int
    training_sections: tuple[int, ...]
    assignments: tuple[tuple[int, int, tuple[int, int]], ...]  # (start, stop, model key)

    def model_key_for(self, section: int) -> tuple[int, int]:
        for start, stop, key in self.assignments:
            if start <= section < stop:
                return key
        raise StackmapError(f"section {section} outside the plan range")

    def sections(self) -> list[int]:
        return list(range(self.first, self.last + 1))

    def model_keys(self) -> list[tuple[int, int]]:
        seen = []
        for _, _, key in self.assignments:
            if key not in seen:
                seen.append(key)
        return seen


def plan_intervals(
    training_sections: list[int], stack_range: tuple[int, int], area: str = "area"
) -> MappingPlan:
    """Assign every section in [first, last] to exactly one pair model."""
    first, last = stack_range
    if first > last:
        raise StackmapError("empty stack range")
    sections = list(training_sections)
    if len(sections) < 2:
        raise StackmapError("need at least 2 training sections")
    if len(set(sections)) != len(sections):
        raise StackmapError("duplicate training sections")
    if sections != sorted(sections):
        raise StackmapError("training sections must be strictly increasing")
    if sections[0] < first or sections[-1] > last:
        raise StackmapError("training sections must lie inside the stack range")

    pairs = list(zip(sections, sections[1:]))
    assignments: list[tuple[int, int, tuple[int, int]]] = []
    if first < sections[0]:
        assignments.append((first, sections[0], pairs[0]))
    for s_a, s_b in pairs:
        assignments.append((s_a, s_b, (s_a, s_b)))
    assignments.append((sections[-1], last + 1, pairs[-1]))
    return MappingPlan(area, first, last, tuple(sections), tuple(assignments))


# ---------------------------------------------------------------------------
# ROI projection


@dataclass(frozen=True)
class RoiProjection:
    mask: np.ndarray  # bool, on the requested grid
    spacing_um: float
    shift_px: tuple[float, float]  # (dy, dx) applied to the reference, in target px
    fallback: bool  # correlation too weak; identity used


def _block_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape
    hc, wc = (h // factor) * factor, (w // factor) * factor
    cropped = img[:hc, :wc]
    return cropped.reshape(hc // factor, factor, wc // factor, factor).mean(axis=(1, 3))


def estimate_translation(
    reference: np.ndarray, target: np.ndarray
) -> tuple[tuple[int, int], float]:
    """Phase correlation; returns integer (dy, dx) moving reference onto target."""
    if reference.shape != target.shape:
        raise StackmapError("phase correlation needs equal shapes")
    f = np.fft.fft2(reference - reference.mean())
    g = np.fft.fft2(target - target.mean())
    cross = g * np.conj(f)
    denom = np.abs(cross)
    denom[denom == 0] = 1.0
    corr = np.real(np.fft.ifft2(cross / denom))
    peak = np.unravel_index(np.argmax(corr), corr.shape)
    dy, dx = int(peak[0]), int(peak[1])
    h, w = corr.shape
    if dy > h // 2:
        dy -= h
    if dx > w // 2:
        dx -= w
    return (dy, dx), float(corr.max())


def project_roi(
    reference_labels: LabelMap,
    target_image: SectionImage,
    reference_image: SectionImage | None = None,
    transform: np.ndarray | None = None,
    roi_spacing_um: float = 64.0,
    max_dist_mm: float = 5.0,
    coarse_spacing_um: float = 64.0,
    peak_threshold: float = 0.05,
) -> RoiProjection:
    """Project a reference area mask onto a target section and dilate it.

    With a manifest transform (2x3 pixel affine, target <- reference) the
    mapping is direct; otherwise pure translation is estimated by phase
    correlation between the two images downsampled to coarse_spacing_um.
    The projected mask is dilated to the proximity band used for patch
    sampling (physical Euclidean distance).
    """
    area = reference_labels.labels == LabelClass.AREA
    if not area.any():
        raise StackmapError("empty reference: no area pixels to project")

    out_h = max(1, int(np.ceil(target_image.height * target_image.spacing_um / roi_spacing_um)))
    out_w = max(1, int(np.ceil(target_image.width * target_image.spacing_um / roi_spacing_um)))

    fallback = False
    if transform is not None:
        a = np.asarray(transform, dtype=np.float64)
        if a.shape != (2, 3):
            raise StackmapError("transform must be a 2x3 pixel affine")
        shift_ref_px = (0.0, 0.0)
        affine = a
    else:
        if reference_image is None:
            shift_ref_px, affine, fallback = (0.0, 0.0), None, False
        else:
            factor = max(1, int(round(coarse_spacing_um / reference_image.spacing_um)))
            ref_ds = _block_downsample(reference_image.intensities, factor)
            tgt_ds = _block_downsample(target_image.intensities, factor)
            (dy, dx), peak = estimate_translation(ref_ds, tgt_ds)
            if peak < peak_threshold:
                shift_ref_px, fallback = (0.0, 0.0), True
            else:
                scale = factor * reference_image.spacing_um / reference_labels.spacing_um
                shift_ref_px = (dy * scale, dx * scale)
            affine = None

    # sample the reference mask at every ROI-grid pixel center
    sp_ref = reference_labels.spacing_um
    rr = (np.arange(out_h) + 0.5) * roi_spacing_um
    cc = (np.arange(out_w) + 0.5) * roi_spacing_um
    if affine is not None:
        # target px -> reference px via inverse affine
        tgt_c = np.broadcast_to(cc, (out_h, out_w))
        tgt_r = np.broadcast_to(rr[:, None], (out_h, out_w))
        m = np.vstack([affine, [0.0, 0.0, 1.0]])
        inv = np.linalg.inv(m)
        px_c = tgt_c / target_image.spacing_um - 0.5
        px_r = tgt_r / target_image.spacing_um - 0.5
        src_c = inv[0, 0] * px_c + inv[0, 1] * px_r + inv[0, 2]
        src_r = inv[1, 0] * px_c + inv[1, 1] * px_r + inv[1, 2]
        src_c = src_c * target_image.spacing_um / sp_ref
        src_r = src_r * target_image.spacing_um / sp_ref
    else:
        src_r = (rr[:, None] / sp_ref - 0.5) - shift_ref_px[0]
        src_c = (cc[None, :] / sp_ref - 0.5) - shift_ref_px[1]
        src_r = np.broadcast_to(src_r, (out_h, out_w))
        src_c = np.broadcast_to(src_c, (out_h, out_w))

    ri = np.clip(np.round(src_r).astype(np.int64), 0, reference_labels.height - 1)
    ci = np.clip(np.round(src_c).astype(np.int64), 0, reference_labels.width - 1)
    inb = (
        (np.round(src_r) >= 0)
        & (np.round(src_r) < reference_labels.height)
        & (np.round(src_c) >= 0)
        & (np.round(src_c) < reference_labels.width)
    )
    projected = np.zeros((out_h, out_w), dtype=bool)
    projected[inb] = area[ri[inb], ci[inb]]

    if projected.any():
        dist_um = ndimage.distance_transform_edt(
            ~projected, sampling=(roi_spacing_um, roi_spacing_um)
        )
        mask = dist_um <= max_dist_mm * 1000.0
    else:
        mask = projected
    return RoiProjection(mask, roi_spacing_um, shift_ref_px, fallback)


# ---------------------------------------------------------------------------
# Tiled inference


@dataclass(frozen=True)
class SectionPrediction:
    labels: LabelMap
    max_prob: np.ndarray  # float32, same grid
    roi: np.ndarray  # bool, same grid
    empty_roi: bool = False


def predict_section(
    model: IntervalModel,
    section: SectionImage,
    roi: RoiProjection,
    coarse_quarter_turns: int = 0,
    stride_divisor: int = 2,
) -> SectionPrediction:
    """Sliding-window inference over tiles whose centers lie inside the ROI.

    Overlapping logits are averaged (order-independent), the per-pixel
    argmax breaks ties toward the lower class index, and everything
    outside the ROI is background.
    """
    spec = model.spec()
    out_size = spec.out_size_px
    sp_out = spec.out_spacing_um
    if abs(roi.spacing_um - sp_out) > 1e-6:
        raise StackmapError("ROI grid must match the network output spacing")
    prof = model.profile

    out_h = max(1, int(np.ceil(section.height * section.spacing_um / sp_out)))
    out_w = max(1, int(np.ceil(section.width * section.spacing_um / sp_out)))
    mask = np.zeros((out_h, out_w), dtype=bool)
    mh = min(out_h, roi.mask.shape[0])
    mw = min(out_w, roi.mask.shape[1])
    mask[:mh, :mw] = roi.mask[:mh, :mw]

    labels = np.zeros((out_h, out_w), dtype=np.uint8)
    max_prob = np.zeros((out_h, out_w), dtype=np.float32)
    if not mask.any():
        lm = LabelMap(section.section_index, sp_out, labels)
        return SectionPrediction(lm, max_prob, mask, empty_roi=True)

    stride_px = max(1, out_size // stride_divisor)
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    r_lo, r_hi = int(rows[0]), int(rows[-1])
    c_lo, c_hi = int(cols[0]), int(cols[-1])

    logit_sum = np.zeros((net.N_CLASSES, out_h, out_w), dtype=np.float64)
    count = np.zeros((out_h, out_w), dtype=np.int32)

    r_starts = range(r_lo - out_size + 1, r_hi + 1, stride_px)
    c_starts = range(c_lo - out_size + 1, c_hi + 1, stride_px)
    k = coarse_quarter_turns % 4
    for g_r in r_starts:
        for g_c in c_starts:
            cr, cc = g_r + out_size // 2, g_c + out_size // 2
            if not (0 <= cr < out_h and 0 <= cc < out_w) or not mask[cr, cc]:
                continue
            center = ((g_c + out_size / 2.0) * sp_out, (g_r + out_size / 2.0) * sp_out)
            hr = lr = None
            if spec.uses_hr:
                hr = extract_patch(section, center, prof.hr_size_px, prof.hr_spacing_um)
                hr = np.rot90(hr, k)[None, None].astype(np.float32)
            if spec.uses_lr:
                lr = extract_patch(section, center, prof.lr_size_px, prof.lr_spacing_um)
                lr = np.rot90(lr, k)[None, None].astype(np.float32)
            _, cache = net.forward(spec, model.params, hr, lr, mode="eval", want_cache=True)
            logits = np.rot90(cache.logits[0], -k, axes=(1, 2))
            rr0, rr1 = max(g_r, 0), min(g_r + out_size, out_h)
            cc0, cc1 = max(g_c, 0), min(g_c + out_size, out_w)
            logit_sum[:, rr0:rr1, cc0:cc1] += logits[
                :, rr0 - g_r : rr1 - g_r, cc0 - g_c : cc1 - g_c
            ]
            count[rr0:rr1, cc0:cc1] += 1

    covered = (count > 0) & mask
    if covered.any():
        avg = logit_sum[:, covered] / count[covered]
        z = avg - avg.max(axis=0, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=0, keepdims=True)
        labels[covered] = p.argmax(axis=0).astype(np.uint8)
        max_prob[covered] = p.max(axis=0).astype(np.float32)
    lm = LabelMap(section.section_index, sp_out, labels)
    return SectionPrediction(lm, max_prob, mask, empty_roi=False)


def segment_stack(
    plan: MappingPlan,
    dataset: DatasetManifest,
    models: dict[tuple[int, int], IntervalModel],
    annotation_sections: list[int] | None = None,
    sections: list[int] | None = None,
    annotation_window: int = 5,
    stride_divisor: int = 2,
    progress=None,
) -> dict[int, SectionPrediction]:
    """Predict every plan section, chaining ROIs outward from annotations.

    The ROI reference is the closest annotated section when within
    `annotation_window` sections, otherwise the closest already-predicted
    neighbor's output.
    """
    for key in plan.model_keys():
        if key not in models:
            raise StackmapError(f"missing model for interval pair {key}")
    ann_sections = sorted(
        annotation_sections if annotation_sections is not None else plan.training_sections
    )
    todo = sections if sections is not None else plan.sections()
    todo = sorted(todo, key=lambda s: min(abs(s - a) for a in ann_sections))

    results: dict[int, SectionPrediction] = {}
    sections_cache: dict[int, SectionImage] = {}

    def image_of(s: int) -> SectionImage:
        if s not in sections_cache:
            sections_cache[s] = dataset.load_section_image(s)
        return sections_cache[s]

    done = 0
    for t in todo:
        model = models[plan.model_key_for(t)]
        spec = model.spec()
        nearest_ann = min(ann_sections, key=lambda a: abs(a - t))
        if abs(nearest_ann - t) <= annotation_window or not results:
            ref_labels = dataset.load_label_map(nearest_ann)
            ref_image = image_of(nearest_ann)
        else:
            nearest_done = min(results, key=lambda d: abs(d - t))
            ref_labels = results[nearest_done].labels
            ref_image = image_of(nearest_done)
        target = image_of(t)
        if (ref_labels.labels == LabelClass.AREA).any():
            roi = project_roi(
                ref_labels, target, reference_image=ref_image, roi_spacing_um=spec.out_spacing_um
            )
        else:
            out_h = max(1, int(np.ceil(target.height * target.spacing_um / spec.out_spacing_um)))
            out_w = max(1, int(np.ceil(target.width * target.spacing_um / spec.out_spacing_um)))
            roi = RoiProjection(
                np.zeros((out_h, out_w), dtype=bool), spec.out_spacing_um, (0.0, 0.0), False
            )
        results[t] = predict_section(
            model,
            target,
            roi,
            coarse_quarter_turns=dataset.coarse_rotation_quarter_turns,
            stride_divisor=stride_divisor,
        )
        done += 1
        if progress is not None:
            progress(done / len(todo))
    return results
