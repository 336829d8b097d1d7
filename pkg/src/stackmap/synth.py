"""Procedural section stacks with ground-truth labels for desk-scale runs.

Each section shows a folded cortical ring (cor) around white matter (wm) on
a bright background, with a contiguous angular sector of the ring as the
target area.  The sector is marked by a cell-dot texture whose mean
coverage matches the surrounding cortex, so coarse views cannot separate
the classes by gray level: fine-texture models must use the dots, and
coarse-context models must use ring geometry.  The sector position drifts
smoothly across sections, and the dot size of the target area drifts along
the stack (crossing the cortex dot size mid-stack), which penalizes a
single stack-wide texture model relative to interval-local ones.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    DatasetManifest,
    LabelClass,
    LabelMap,
    SectionEntry,
    SectionImage,
    StackmapError,
    save_image,
    save_label_png,
    save_manifest,
)

DEGRADE_MODES = ("rift", "fold", "intensity_gradient")


@dataclass(frozen=True)
class SynthConfig:
    n_sections: int = 48
    width: int = 768
    height: int = 768
    spacing_um: float = 16.0
    thickness_um: float = 80.0
    # ribbon geometry: mid-line radius folded by two harmonics; the
    # frequency-1 term breaks rotational symmetry so angular position is
    # recoverable from local geometry alone
    ring_radius_mm: float = 3.3
    band_width_mm: float = 1.6
    fold_amplitude_mm: float = 0.4
    fold_frequency: float = 7.0
    fold_phase_rad: float = 0.3
    fold_amplitude2_mm: float = 0.55
    # target-area sector
    area_extent_rad: float = 1.2
    area_start_rad: float = 0.6
    drift_rad_per_section: float = 0.02
    # cell-dot texture; area dot radius drifts across the stack while its
    # coverage stays matched to cor (spacing scales with radius)
    cor_dot_radius_um: float = 36.0
    cor_dot_spacing_um: float = 110.0
    area_dot_radius_start_um: float = 26.0
    area_dot_radius_end_um: float = 50.0
    # rendering
    bg_intensity: float = 0.97
    wm_intensity: float = 0.80
    cortex_intensity: float = 0.88
    dot_intensity: float = 0.30
    noise_level: float = 0.035
    seed: int = 0

    def __post_init__(self):
        if min(self.n_sections, self.width, self.height) < 1:
            raise StackmapError("dimensions must be positive")
        if self.spacing_um <= 0 or self.thickness_um <= 0:
            raise StackmapError("spacing and thickness must be positive")
        if not 0 < self.area_extent_rad < 2 * np.pi:
            raise StackmapError("area sector must be wider than 0 and narrower than the ring")
        if self.cor_dot_spacing_um <= 0 or self.cor_dot_radius_um < 0:
            raise StackmapError("dot geometry must be non-negative")


def _poisson_disc(
    rng: np.random.Generator,
    extent_mm: tuple[float, float],
    min_dist_mm: float,
    oversample: float = 2.0,
) -> np.ndarray:
    """Blue-noise points by Matern-II thinning of a dense uniform candidate set.

    Every candidate carries a priority; a point survives when no candidate
    within min_dist has a lower priority.  Retained intensity depends only
    on min_dist, which keeps dot coverage matched across textures by
    scaling spacing with radius.
    """
    w, h = extent_mm
    n_cand = max(1, int(oversample * w * h / (min_dist_mm**2)))
    pts = rng.random((n_cand, 2)) * np.array([w, h])
    priority = rng.random(n_cand)
    tree = cKDTree(pts)
    pairs = tree.query_pairs(min_dist_mm, output_type="ndarray")
    killed = np.zeros(n_cand, dtype=bool)
    if pairs.size:
        a, b = pairs[:, 0], pairs[:, 1]
        first_wins = priority[a] < priority[b]
        killed[np.where(first_wins, b, a)] = True
    return pts[~killed]


def _ring_radius(cfg: SynthConfig, theta: np.ndarray) -> np.ndarray:
    return (
        cfg.ring_radius_mm
        + cfg.fold_amplitude_mm * np.sin(cfg.fold_frequency * theta + cfg.fold_phase_rad)
        + cfg.fold_amplitude2_mm * np.sin(theta)
    )


def _in_sector(theta: np.ndarray, start: float, extent: float) -> np.ndarray:
    rel = np.mod(theta - start, 2 * np.pi)
    return rel < extent


def area_dot_radius_um(cfg: SynthConfig, section: int) -> float:
    if cfg.n_sections == 1:
        return cfg.area_dot_radius_start_um
    t = section / (cfg.n_sections - 1)
    return cfg.area_dot_radius_start_um + t * (
        cfg.area_dot_radius_end_um - cfg.area_dot_radius_start_um
    )


def ground_truth_labels(cfg: SynthConfig, section: int) -> np.ndarray:
    """Geometric four-class partition of one section (no texture, no noise)."""
    sp_mm = cfg.spacing_um / 1000.0
    cx, cy = cfg.width * sp_mm / 2.0, cfg.height * sp_mm / 2.0
    xs = (np.arange(cfg.width) + 0.5) * sp_mm - cx
    ys = (np.arange(cfg.height) + 0.5) * sp_mm - cy
    xg, yg = np.meshgrid(xs, ys)
    r = np.hypot(xg, yg)
    theta = np.arctan2(yg, xg)
    r_mid = _ring_radius(cfg, theta)
    half = cfg.band_width_mm / 2.0
    labels = np.zeros((cfg.height, cfg.width), dtype=np.uint8)
    labels[r < r_mid - half] = LabelClass.WM
    ring = np.abs(r - r_mid) <= half
    labels[ring] = LabelClass.COR
    start = cfg.area_start_rad + cfg.drift_rad_per_section * section
    labels[ring & _in_sector(theta, start, cfg.area_extent_rad)] = LabelClass.AREA
    return labels


def render_section(cfg: SynthConfig, section: int) -> tuple[np.ndarray, np.ndarray]:
    """One section image plus its ground truth; deterministic under the seed."""
    labels = ground_truth_labels(cfg, section)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, section]))
    sp_mm = cfg.spacing_um / 1000.0
    h, w = cfg.height, cfg.width

    img = np.full((h, w), cfg.bg_intensity, dtype=np.float64)
    img[labels == LabelClass.WM] = cfg.wm_intensity
    ring = (labels == LabelClass.COR) | (labels == LabelClass.AREA)
    img[ring] = cfg.cortex_intensity

    area_mask = labels == LabelClass.AREA
    extent_mm = (w * sp_mm, h * sp_mm)
    r_area = area_dot_radius_um(cfg, section) / 1000.0
    r_cor = cfg.cor_dot_radius_um / 1000.0
    d_cor = cfg.cor_dot_spacing_um / 1000.0
    d_area = d_cor * (r_area / r_cor) if r_cor > 0 else d_cor

    ys, xs = np.nonzero(ring)
    px = np.column_stack(((xs + 0.5) * sp_mm, (ys + 0.5) * sp_mm))
    in_area = area_mask[ys, xs]

    for dots_mm, radius_mm, member in (
        (_poisson_disc(rng, extent_mm, d_cor), r_cor, ~in_area),
        (_poisson_disc(rng, extent_mm, d_area), r_area, in_area),
    ):
        if dots_mm.shape[0] == 0 or radius_mm <= 0 or not member.any():
            continue
        tree = cKDTree(dots_mm)
        dist, _ = tree.query(px[member], k=1)
        # half-pixel soft edge against aliasing
        edge = sp_mm / 2.0
        blend = np.clip((radius_mm + edge - dist) / (2 * edge), 0.0, 1.0)
        vals = img[ys[member], xs[member]]
        img[ys[member], xs[member]] = vals + blend * (cfg.dot_intensity - vals)

    if cfg.noise_level > 0:
        img += rng.normal(0.0, cfg.noise_level, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), labels


def degrade_section(
    section: SectionImage, mode: str, magnitude: float, seed: int = 0
) -> SectionImage:
    """Apply one named histological artifact; ground truth is unaffected."""
    if mode not in DEGRADE_MODES:
        raise StackmapError(f"unknown degrade mode {mode!r}")
    if not 0.0 <= magnitude <= 1.0:
        raise StackmapError("magnitude must lie in [0, 1]")
    img = section.intensities.copy()
    if magnitude == 0.0:
        return replace(section, intensities=img)
    rng = np.random.default_rng(seed)
    h, w = img.shape

    if mode == "rift":
        # bright tear: jagged polyline across the image, dilated to a band
        n_knots = 8
        xs = np.linspace(0, w - 1, n_knots)
        ys = rng.uniform(0.25 * h, 0.75 * h, size=n_knots)
        t = np.linspace(0, 1, 40 * n_knots)
        px = np.interp(t, np.linspace(0, 1, n_knots), xs)
        py = np.interp(t, np.linspace(0, 1, n_knots), ys)
        tree = cKDTree(np.column_stack([px, py]))
        yy, xx = np.mgrid[0:h, 0:w]
        dist, _ = tree.query(np.column_stack([xx.ravel(), yy.ravel()]), k=1)
        width_px = 1.0 + 6.0 * magnitude
        tear = (dist.reshape(h, w) <= width_px)
        img[tear] = 0.98
    elif mode == "fold":
        # duplicated, darkened band of tissue
        band_h = max(2, int(0.08 * h * magnitude) + 2)
        y0 = int(rng.uniform(0.2 * h, 0.7 * h))
        off = max(1, band_h // 2)
        src = img[max(0, y0 - off) : max(0, y0 - off) + band_h]
        img[y0 : y0 + src.shape[0]] = src * (1.0 - 0.35 * magnitude)
    else:  # intensity_gradient
        ramp = 1.0 + 0.4 * magnitude * (np.linspace(0, 1, w) - 0.5)
        img = img * ramp[None, :]
    return replace(section, intensities=np.clip(img, 0.0, 1.0).astype(np.float32))


def generate_stack(cfg: SynthConfig) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """All section images and ground-truth label grids, in section order."""
    images, labels = [], []
    for s in range(cfg.n_sections):
        img, lab = render_section(cfg, s)
        images.append(img)
        labels.append(lab)
    return images, labels


def write_dataset(cfg: SynthConfig, out_dir: Path | str, name: str = "synthetic") -> Path:
    """Materialize a stack as a core-format dataset directory; returns manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in range(cfg.n_sections):
        img, lab = render_section(cfg, s)
        img_rel = f"images/section_{s:04d}.png"
        lab_rel = f"labels/section_{s:04d}.png"
        save_image(img, out_dir / img_rel, bits=8)
        save_label_png(
            LabelMap(section_index=s, spacing_um=cfg.spacing_um, labels=lab),
            out_dir / lab_rel,
        )
        entries.append(SectionEntry(s, img_rel, lab_rel))
    manifest = DatasetManifest(
        name=name,
        sections=tuple(entries),
        in_plane_spacing_um=cfg.spacing_um,
        thickness_um=cfg.thickness_um,
        areas=("A1",),
        provenance=f"synthetic stack, seed={cfg.seed}",
    )
    path = out_dir / "manifest.json"
    save_manifest(manifest, path)
    return path
