"""Intensity normalization, lung-box cropping, and per-slice resizing.

Axial slices are 2D arrays of shape (rows, cols) = (y, x). Resizing uses the
corner-aligned convention (source coordinate = target index * (src-1)/(dst-1)),
which makes same-size resizes exact. Images are resized bilinearly, masks with
nearest-neighbor so they stay binary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .volumes import BinaryMask, ProbMap, Volume, require_same_geometry


@dataclass(frozen=True)
class PreprocessConfig:
    hu_min: float = -1000.0
    hu_max: float = 200.0
    target_rows: int = 296
    target_cols: int = 216
    crop_margin: int = 0

    def __post_init__(self):
        if not self.hu_min < self.hu_max:
            raise DataError(f"hu_min must be < hu_max, got {self.hu_min} >= {self.hu_max}")
        if self.target_rows < 2 or self.target_cols < 2:
            raise DataError("target dims must be >= 2")
        if self.crop_margin < 0:
            raise DataError("crop_margin must be >= 0")


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive voxel bounds (x0..x1, y0..y1, z0..z1)."""

    x0: int
    x1: int
    y0: int
    y1: int
    z0: int
    z1: int

    def __post_init__(self):
        if self.x0 > self.x1 or self.y0 > self.y1 or self.z0 > self.z1:
            raise DataError(f"degenerate bounding box {self}")

    @property
    def shape_yx(self) -> tuple[int, int]:
        return (self.y1 - self.y0 + 1, self.x1 - self.x0 + 1)

    @property
    def z_range(self) -> range:
        return range(self.z0, self.z1 + 1)

    def slices_zyx(self) -> tuple[slice, slice, slice]:
        return (
            slice(self.z0, self.z1 + 1),
            slice(self.y0, self.y1 + 1),
            slice(self.x0, self.x1 + 1),
        )


@dataclass(frozen=True)
class SliceProvenance:
    """Everything needed to map a processed slice back into its source volume."""

    volume_id: str
    z: int
    box: BoundingBox
    slice_shape: tuple[int, int]  # (ny, nx) of the uncropped slice


@dataclass(frozen=True)
class NormalizedSlice:
    pixels: np.ndarray  # (rows, cols) float32 in [0, 1]
    provenance: SliceProvenance


def normalize_hu(volume: Volume, cfg: PreprocessConfig) -> ProbMap:
    """Map HU linearly from [hu_min, hu_max] to [0, 1], clamping outside the window."""
    hu = volume.voxels.astype(np.float32)
    out = (hu - cfg.hu_min) / (cfg.hu_max - cfg.hu_min)
    np.clip(out, 0.0, 1.0, out=out)
    return ProbMap(volume.geometry, out)


def bounding_box(mask: BinaryMask, margin: int = 0) -> BoundingBox:
    """Tightest box containing all true voxels, dilated by margin, clipped to bounds."""
    zs, ys, xs = np.nonzero(mask.voxels)
    if zs.size == 0:
        raise DataError("bounding_box: mask has no true voxels")
    nx, ny, nz = mask.geometry.dims
    return BoundingBox(
        x0=max(int(xs.min()) - margin, 0),
        x1=min(int(xs.max()) + margin, nx - 1),
        y0=max(int(ys.min()) - margin, 0),
        y1=min(int(ys.max()) + margin, ny - 1),
        z0=max(int(zs.min()) - margin, 0),
        z1=min(int(zs.max()) + margin, nz - 1),
    )


def _axis_weights(src: int, dst: int) -> tuple[np.ndarray, np.ndarray]:
    # lo is clamped to src-2 so lo+1 stays valid; the weight then reaches 1 at the edge.
    if src < 2:
        raise DataError(f"resize: source axis must have >= 2 samples, got {src}")
    if dst < 2:
        raise DataError(f"resize: target axis must have >= 2 samples, got {dst}")
    pos = np.arange(dst, dtype=np.float64) * ((src - 1) / (dst - 1))
    lo = np.minimum(np.floor(pos).astype(np.intp), src - 2)
    return lo, pos - lo


def resize_bilinear(grid: np.ndarray, target_rows: int, target_cols: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2D grid; identity when sizes match."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise DataError(f"resize expects a 2D grid, got shape {grid.shape}")
    if grid.shape == (target_rows, target_cols):
        return grid.copy()
    out_dtype = np.result_type(grid.dtype, np.float32)
    work = grid.astype(np.float64)

    r_lo, r_w = _axis_weights(grid.shape[0], target_rows)
    work = work[r_lo, :] * (1.0 - r_w)[:, None] + work[r_lo + 1, :] * r_w[:, None]
    c_lo, c_w = _axis_weights(grid.shape[1], target_cols)
    work = work[:, c_lo] * (1.0 - c_w)[None, :] + work[:, c_lo + 1] * c_w[None, :]

    # convex weights cannot overshoot; clip away last-ulp rounding excess
    np.clip(work, grid.min(), grid.max(), out=work)
    return work.astype(out_dtype)


def resize_nearest(grid: np.ndarray, target_rows: int, target_cols: int) -> np.ndarray:
    """Corner-aligned nearest-neighbor resize (round half up); keeps the input dtype."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise DataError(f"resize expects a 2D grid, got shape {grid.shape}")
    if grid.shape == (target_rows, target_cols):
        return grid.copy()
    r_lo, r_w = _axis_weights(grid.shape[0], target_rows)
    c_lo, c_w = _axis_weights(grid.shape[1], target_cols)
    r_idx = r_lo + (r_w >= 0.5)
    c_idx = c_lo + (c_w >= 0.5)
    return grid[np.ix_(r_idx, c_idx)]


def extract_training_slices(
    volume: Volume,
    lung: BinaryMask,
    cfg: PreprocessConfig,
    volume_id: str = "volume",
) -> list[tuple[NormalizedSlice, np.ndarray]]:
    """Crop to the lung bounding box, normalize, and resize every axial slice.

    Returns one (NormalizedSlice, resized lung-mask slice) pair per slice
    intersecting the box. Masks are resized nearest-neighbor and stay boolean.
    """
    require_same_geometry(volume, lung, "extract_training_slices")
    box = bounding_box(lung, cfg.crop_margin)
    normalized = normalize_hu(volume, cfg).voxels
    ny, nx = volume.geometry.dims[1], volume.geometry.dims[0]

    pairs = []
    ysl, xsl = slice(box.y0, box.y1 + 1), slice(box.x0, box.x1 + 1)
    for z in box.z_range:
        image = resize_bilinear(normalized[z, ysl, xsl], cfg.target_rows, cfg.target_cols)
        mask = resize_nearest(lung.voxels[z, ysl, xsl], cfg.target_rows, cfg.target_cols)
        prov = SliceProvenance(volume_id=volume_id, z=z, box=box, slice_shape=(ny, nx))
        pairs.append((NormalizedSlice(image.astype(np.float32), prov), mask))
    return pairs


def unresize_to_original(
    grid: np.ndarray, provenance: SliceProvenance, kind: str = "probability"
) -> np.ndarray:
    """Invert the crop+resize: back to box size, then zero-padded full-slice extent.

    kind selects the interpolation: "probability" (bilinear) or "mask" (nearest).
    """
    box = provenance.box
    ny, nx = provenance.slice_shape
    if box.x1 >= nx or box.y1 >= ny:
        raise DataError(f"provenance box {box} exceeds slice shape {provenance.slice_shape}")
    rows, cols = box.shape_yx
    if kind == "probability":
        small = resize_bilinear(np.asarray(grid), rows, cols)
        out = np.zeros((ny, nx), dtype=small.dtype)
    elif kind == "mask":
        small = resize_nearest(np.asarray(grid).astype(bool), rows, cols)
        out = np.zeros((ny, nx), dtype=bool)
    else:
        raise DataError(f"unknown unresize kind {kind!r}")
    out[box.y0 : box.y1 + 1, box.x0 : box.x1 + 1] = small
    return out
