"""Domain types, the four-class label scheme, and on-disk formats.

Everything downstream works on the types defined here: grayscale section
images with physical spacing, per-pixel label maps over the four classes
(bg, wm, cor, area), dataset manifests, polygon annotation sets, and the
raw+JSON volume container used by the 3D stage.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from PIL import Image


class StackmapError(Exception):
    """Base class for errors raised by this package."""


class CorruptFileError(StackmapError):
    """On-disk artifact is inconsistent with its own metadata."""


class LabelClass(IntEnum):
    """Four-class scheme: background, white matter, non-target cortex, target area."""

    BG = 0
    WM = 1
    COR = 2
    AREA = 3


# Indexed-PNG palette for label maps, one RGB triple per class.
LABEL_PALETTE = {
    LabelClass.BG: (0, 0, 0),
    LabelClass.WM: (96, 96, 96),
    LabelClass.COR: (64, 128, 192),
    LabelClass.AREA: (220, 64, 48),
}


@dataclass(frozen=True)
class SectionImage:
    """One grayscale section of the stack, intensities normalized to [0, 1]."""

    section_index: int
    spacing_um: float
    thickness_um: float
    intensities: np.ndarray  # (height, width) float32 in [0, 1]

    def __post_init__(self):
        arr = np.asarray(self.intensities, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise StackmapError("section image must be a non-empty 2D grid")
        if self.spacing_um <= 0 or self.thickness_um <= 0:
            raise StackmapError("spacing_um and thickness_um must be positive")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise StackmapError("intensities must lie in [0, 1]")
        object.__setattr__(self, "intensities", arr)

    @property
    def height(self) -> int:
        return self.intensities.shape[0]

    @property
    def width(self) -> int:
        return self.intensities.shape[1]


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel class map aligned to a section (own spacing, may differ from image)."""

    section_index: int
    spacing_um: float
    labels: np.ndarray  # (height, width) uint8 of LabelClass values

    def __post_init__(self):
        arr = np.asarray(self.labels, dtype=np.uint8)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise StackmapError("label map must be a non-empty 2D grid")
        if self.spacing_um <= 0:
            raise StackmapError("spacing_um must be positive")
        if arr.size and arr.max() > int(LabelClass.AREA):
            raise StackmapError("label map contains values outside the four classes")
        object.__setattr__(self, "labels", arr)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class SectionEntry:
    section_index: int
    image: str
    label: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    """Single relocatable JSON document describing a section stack on disk.

    All file paths are relative to the manifest's own directory.  Transforms,
    when present, are 3x4 affines mapping homogeneous pixel coordinates
    (u, v, 0, 1) of a section into world millimeters; absent transforms mean
    rigid z-stacking at section-thickness increments.
    """

    name: str
    sections: tuple[SectionEntry, ...]
    in_plane_spacing_um: float
    thickness_um: float
    areas: tuple[str, ...]
    transforms: tuple[np.ndarray, ...] | None = None
    coarse_rotation_quarter_turns: int = 0
    provenance: str = ""
    root: Path | None = None  # set on load; not serialized

    def __post_init__(self):
        idx = [s.section_index for s in self.sections]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise StackmapError("section indices must be strictly increasing")
        if self.transforms is not None and len(self.transforms) != len(self.sections):
            raise StackmapError("one transform per section required when transforms present")

    def section(self, index: int) -> SectionEntry:
        for s in self.sections:
            if s.section_index == index:
                return s
        raise StackmapError(f"no section with index {index}")

    def has_label(self, index: int) -> bool:
        try:
            return self.section(index).label is not None
        except StackmapError:
            return False

    def resolve(self, relpath: str) -> Path:
        if self.root is None:
            raise StackmapError("manifest has no root directory; load it from disk first")
        return self.root / relpath

    def load_section_image(self, index: int) -> SectionImage:
        entry = self.section(index)
        arr = load_image(self.resolve(entry.image))
        return SectionImage(
            section_index=index,
            spacing_um=self.in_plane_spacing_um,
            thickness_um=self.thickness_um,
            intensities=arr,
        )

    def load_label_map(self, index: int) -> LabelMap:
        entry = self.section(index)
        if entry.label is None:
            raise StackmapError(f"section {index} has no label file")
        return load_label_png(self.resolve(entry.label), index, self.in_plane_spacing_um)

    def labeled_sections(self) -> list[int]:
        return [s.section_index for s in self.sections if s.label is not None]


@dataclass(frozen=True)
class Polygon:
    """Closed simple polygon in pixel coordinates; vertices are (x, y) pairs."""

    vertices: np.ndarray  # (n, 2) float
    label: LabelClass = LabelClass.AREA

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise StackmapError("polygon needs at least 3 (x, y) vertices")
        object.__setattr__(self, "vertices", v)


@dataclass
class AnnotationSet:
    """Sparse polygon annotations for one target area across the stack."""

    area: str
    polygons: dict[int, list[Polygon]] = field(default_factory=dict)

    def sections(self) -> list[int]:
        return sorted(self.polygons)

    def add(self, section_index: int, polygon: Polygon) -> None:
        self.polygons.setdefault(section_index, []).append(polygon)


# ---------------------------------------------------------------------------
# Rasterization


def _even_odd_mask(poly: np.ndarray, height: int, width: int) -> np.ndarray:
    """Even-odd fill of one polygon, sampled at pixel centers (col+.5, row+.5).

    Vectorized crossing-number test: a pixel is inside when a ray to +x
    crosses an odd number of edges.  Half-open edge handling (y0 <= y < y1)
    keeps shared edges between adjacent polygons unambiguous.
    """
    xs = np.arange(width, dtype=np.float64) + 0.5
    ys = np.arange(height, dtype=np.float64) + 0.5
    px = np.broadcast_to(xs, (height, width))
    py = np.broadcast_to(ys[:, None], (height, width))
    inside = np.zeros((height, width), dtype=bool)
    n = poly.shape[0]
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        if y0 == y1:
            continue
        spans = (y0 <= py) != (y1 <= py)
        with np.errstate(invalid="ignore"):
            x_cross = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= spans & (px < x_cross)
    return inside


def rasterize_annotations(
    ann: AnnotationSet,
    section: SectionImage,
    wm_cor_source: LabelMap | Callable[[SectionImage], LabelMap] | None = None,
) -> LabelMap:
    """Rasterize the polygons for one section into a four-class LabelMap.

    Pixels inside area polygons become AREA; the remaining pixels take their
    wm/cor class from `wm_cor_source` (a LabelMap, a callable producing one,
    or the wm/cor polygons of the annotation set itself when None); everything
    else stays BG.  Even-odd fill, pixel-center sampling, clipping implicit.
    """
    idx = section.section_index
    if idx not in ann.polygons:
        raise StackmapError(f"missing annotation for section {idx}")
    h, w = section.height, section.width
    labels = np.zeros((h, w), dtype=np.uint8)

    if isinstance(wm_cor_source, LabelMap):
        src = wm_cor_source.labels
        if src.shape != (h, w):
            raise StackmapError("wm/cor source grid does not match the section")
        for cls in (LabelClass.WM, LabelClass.COR):
            labels[src == cls] = cls
    elif callable(wm_cor_source):
        src_map = wm_cor_source(section)
        for cls in (LabelClass.WM, LabelClass.COR):
            labels[src_map.labels == cls] = cls

    for cls in (LabelClass.WM, LabelClass.COR, LabelClass.AREA):
        mask = np.zeros((h, w), dtype=bool)
        any_poly = False
        for poly in ann.polygons[idx]:
            if poly.label != cls:
                continue
            any_poly = True
            mask ^= _even_odd_mask(poly.vertices, h, w)
        if any_poly:
            labels[mask] = cls
    return LabelMap(section_index=idx, spacing_um=section.spacing_um, labels=labels)


# ---------------------------------------------------------------------------
# Image and label I/O


def load_image(path: Path | str) -> np.ndarray:
    """Load an 8- or 16-bit grayscale PNG/TIFF, normalized to float32 [0, 1]."""
    with Image.open(path) as im:
        if im.mode == "I;16":
            arr = np.asarray(im, dtype=np.uint16).astype(np.float32) / 65535.0
        elif im.mode == "I":
            arr = np.asarray(im, dtype=np.int32).astype(np.float32) / 65535.0
        else:
            arr = np.asarray(im.convert("L"), dtype=np.uint8).astype(np.float32) / 255.0
    return arr


def save_image(arr: np.ndarray, path: Path | str, bits: int = 8) -> None:
    arr = np.clip(np.asarray(arr, dtype=np.float32), 0.0, 1.0)
    if bits == 16:
        im = Image.fromarray((arr * 65535.0 + 0.5).astype(np.uint16))
    elif bits == 8:
        im = Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8))
    else:
        raise StackmapError("only 8- or 16-bit grayscale supported")
    im.save(path)


def save_label_png(labelmap: LabelMap, path: Path | str) -> None:
    """Write a label map as an indexed PNG with the fixed four-class palette."""
    im = Image.fromarray(labelmap.labels, mode="P")
    palette = []
    for cls in LabelClass:
        palette.extend(LABEL_PALETTE[cls])
    palette.extend([0] * (768 - len(palette)))
    im.putpalette(palette)
    im.save(path)


def load_label_png(path: Path | str, section_index: int, spacing_um: float) -> LabelMap:
    with Image.open(path) as im:
        if im.mode != "P":
            raise CorruptFileError(f"{path}: label PNG must be palette-indexed")
        arr = np.asarray(im, dtype=np.uint8)
    if arr.size and arr.max() > int(LabelClass.AREA):
        raise CorruptFileError(f"{path}: label index outside the four classes")
    return LabelMap(section_index=section_index, spacing_um=spacing_um, labels=arr)


# ---------------------------------------------------------------------------
# Manifest I/O


def save_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    doc = {
        "name": manifest.name,
        "in_plane_spacing_um": manifest.in_plane_spacing_um,
        "thickness_um": manifest.thickness_um,
        "areas": list(manifest.areas),
        "coarse_rotation_quarter_turns": manifest.coarse_rotation_quarter_turns,
        "provenance": manifest.provenance,
        "sections": [
            {"section_index": s.section_index, "image": s.image, "label": s.label}
            for s in manifest.sections
        ],
    }
    if manifest.transforms is not None:
        doc["transforms"] = [np.asarray(t, dtype=float).tolist() for t in manifest.transforms]
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2))


def load_manifest(path: Path | str) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    sections = tuple(
        SectionEntry(s["section_index"], s["image"], s.get("label"))
        for s in doc["sections"]
    )
    transforms = None
    if "transforms" in doc:
        transforms = tuple(np.asarray(t, dtype=np.float64) for t in doc["transforms"])
        for t in transforms:
            if t.shape != (3, 4):
                raise CorruptFileError(f"{path}: transform must be 3x4")
    manifest = DatasetManifest(
        name=doc["name"],
        sections=sections,
        in_plane_spacing_um=float(doc["in_plane_spacing_um"]),
        thickness_um=float(doc["thickness_um"]),
        areas=tuple(doc.get("areas", [])),
        transforms=transforms,
        coarse_rotation_quarter_turns=int(doc.get("coarse_rotation_quarter_turns", 0)),
        provenance=doc.get("provenance", ""),
        root=path.parent,
    )
    for s in manifest.sections:
        if not (path.parent / s.image).exists():
            raise CorruptFileError(f"{path}: missing image file {s.image}")
        if s.label is not None and not (path.parent / s.label).exists():
            raise CorruptFileError(f"{path}: missing label file {s.label}")
    return manifest


# ---------------------------------------------------------------------------
# Volume container (raw little-endian payload + JSON sidecar)

_VOLUME_DTYPES = {"uint8": np.uint8, "float32": np.float32}


@dataclass(frozen=True)
class Volume:
    """Dense 3D grid; labels are uint8 in {0,1}, scalar fields are float32.

    `values` is indexed [x, y, z]; `affine` (4x4) maps voxel indices to
    world millimeters.
    """

    values: np.ndarray
    spacing_mm: tuple[float, float, float]
    affine: np.ndarray | None = None

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim != 3:
            raise StackmapError("volume must be 3D")
        if any(s <= 0 for s in self.spacing_mm):
            raise StackmapError("voxel spacing must be positive")
        aff = self.affine
        if aff is None:
            aff = np.diag([self.spacing_mm[0], self.spacing_mm[1], self.spacing_mm[2], 1.0])
        aff = np.asarray(aff, dtype=np.float64)
        if aff.shape != (4, 4):
            raise StackmapError("affine must be 4x4")
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "affine", aff)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz


def save_volume(vol: Volume, path: Path | str) -> None:
    """Write `path` (raw little-endian payload) and `path + '.json'` sidecar."""
    path = Path(path)
    arr = vol.values
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    if arr.dtype not in (np.uint8, np.float32):
        raise StackmapError(f"unsupported volume dtype {arr.dtype}")
    payload = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes(order="C")
    sidecar = {
        "dims": list(arr.shape),
        "spacing_mm": list(vol.spacing_mm),
        "dtype": str(arr.dtype.name),
        "affine": vol.affine.tolist(),
        "byte_order": "little",
    }
    path.write_bytes(payload)
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))


def load_volume(path: Path | str) -> Volume:
    path = Path(path)
    sidecar_path = Path(str(path) + ".json")
    if not sidecar_path.exists():
        raise CorruptFileError(f"{path}: missing JSON sidecar")
    meta = json.loads(sidecar_path.read_text())
    if meta.get("dtype") not in _VOLUME_DTYPES:
        raise CorruptFileError(f"{path}: unknown dtype {meta.get('dtype')!r}")
    if meta.get("byte_order", "little") != "little":
        raise CorruptFileError(f"{path}: only little-endian payloads supported")
    dims = tuple(int(d) for d in meta["dims"])
    dtype = np.dtype(_VOLUME_DTYPES[meta["dtype"]]).newbyteorder("<")
    payload = path.read_bytes()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise CorruptFileError(
            f"{path}: payload is {len(payload)} bytes, sidecar dims imply {expected}"
        )
    values = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return Volume(
        values=values.astype(_VOLUME_DTYPES[meta["dtype"]]),
        spacing_mm=tuple(float(s) for s in meta["spacing_mm"]),
        affine=np.asarray(meta["affine"], dtype=np.float64),
    )


def spec_digest(obj) -> str:
    """Stable short hash of any JSON-serializable description."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
