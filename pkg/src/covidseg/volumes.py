"""Geometry-aware grid containers for CT volumes, binary masks, and probability maps.

Voxel arrays are stored with shape (nz, ny, nx) in C order, so x varies
fastest, matching the on-disk raw layout. All grids are immutable after
construction and safe to share across threads.

On-disk format: a text header (conventionally ``.vhdr``) with lines
``dims: <nx> <ny> <nz>``, optional ``spacing: <sx> <sy> <sz>``,
``dtype: int16|uint8|float32`` and ``data: <relative raw filename>``;
the raw file holds the voxel payload, little-endian, x fastest.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

_DTYPES = {
    "int16": np.dtype("<i2"),
    "uint8": np.dtype("u1"),
    "float32": np.dtype("<f4"),
}


@dataclass(frozen=True)
class Geometry:
    """Voxel counts (nx, ny, nz) and spacing in mm per voxel (sx, sy, sz)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise DataError(f"dims must be three counts >= 1, got {self.dims!r}")
        if len(self.spacing) != 3 or any(float(s) <= 0 for s in self.spacing):
            raise DataError(f"spacing must be three positive values, got {self.spacing!r}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def shape_zyx(self) -> tuple[int, int, int]:
        nx, ny, nz = self.dims
        return (nz, ny, nx)


def require_same_geometry(a, b, context: str = "operation") -> None:
    """Fail before any computation that pairs grids of unequal geometry."""
    ga, gb = a.geometry, b.geometry
    if ga.dims != gb.dims or ga.spacing != gb.spacing:
        raise DataError(f"{context}: geometry mismatch {ga} vs {gb}")


class _Grid:
    """Shared base: geometry plus a read-only voxel array of shape (nz, ny, nx)."""

    _dtype: np.dtype

    def __init__(self, geometry: Geometry, voxels: np.ndarray):
        voxels = np.asarray(voxels)
        if voxels.shape != geometry.shape_zyx:
            raise DataError(
                f"voxel array shape {voxels.shape} does not match geometry "
                f"(nz, ny, nx) = {geometry.shape_zyx}"
            )
        voxels = np.ascontiguousarray(voxels.astype(self._dtype, copy=False))
        self._check_values(voxels)
        voxels.flags.writeable = False
        self.geometry = geometry
        self.voxels = voxels

    def _check_values(self, voxels: np.ndarray) -> None:
        pass

    def __eq__(self, other):
        return (
            type(other) is type(self)
            and self.geometry == other.geometry
            and np.array_equal(self.voxels, other.voxels)
        )

    def __repr__(self):
        return f"{type(self).__name__}(dims={self.geometry.dims}, spacing={self.geometry.spacing})"


class Volume(_Grid):
    """CT intensity grid in Hounsfield Units (signed 16-bit semantics)."""

    _dtype = np.dtype(np.int16)


class BinaryMask(_Grid):
    """Boolean membership grid (lung or lesion), same geometry as its Volume."""

    _dtype = np.dtype(bool)


class ProbMap(_Grid):
    """Per-voxel probabilities in [0, 1]."""

    _dtype = np.dtype(np.float32)

    def _check_values(self, voxels: np.ndarray) -> None:
        if voxels.size and (voxels.min() < 0.0 or voxels.max() > 1.0):
            raise DataError(
                f"probability values outside [0, 1]: min={voxels.min()}, max={voxels.max()}"
            )


def mask_volume_count(mask: BinaryMask) -> int:
    """Number of true voxels in the mask."""
    return int(np.count_nonzero(mask.voxels))


def _parse_header(path: Path) -> dict:
    fields = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key: value', got {raw!r}")
        key, value = line.split(":", 1)
        fields[key.strip()] = value.strip()
    for required in ("dims", "dtype", "data"):
        if required not in fields:
            raise DataError(f"{path}: header missing required field '{required}'")
    return fields


def read_volume(path) -> Volume | BinaryMask | ProbMap:
    """Read a header + raw pair; the declared dtype selects the grid kind.

    int16 -> Volume, uint8 -> BinaryMask (any nonzero byte reads as true),
    float32 -> ProbMap (values outside [0, 1] are rejected).
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"header file not found: {path}")
    fields = _parse_header(path)

    try:
        dims = tuple(int(t) for t in fields["dims"].split())
    except ValueError:
        raise DataError(f"{path}: malformed dims {fields['dims']!r}") from None
    spacing = (1.0, 1.0, 1.0)
    if "spacing" in fields:
        try:
            spacing = tuple(float(t) for t in fields["spacing"].split())
        except ValueError:
            raise DataError(f"{path}: malformed spacing {fields['spacing']!r}") from None
    geometry = Geometry(dims, spacing)

    token = fields["dtype"]
    if token not in _DTYPES:
        raise DataError(f"{path}: unknown dtype token {token!r}")
    dtype = _DTYPES[token]

    raw_path = path.parent / fields["data"]
    if not raw_path.is_file():
        raise DataError(f"raw file not found: {raw_path}")
    payload = raw_path.read_bytes()
    expected = geometry.voxel_count * dtype.itemsize
    if len(payload) != expected:
        raise DataError(
            f"{raw_path}: payload is {len(payload)} bytes, expected {expected} "
            f"for dims {geometry.dims} and dtype {token}"
        )
    flat = np.frombuffer(payload, dtype=dtype)
    grid = flat.reshape(geometry.shape_zyx)

    if token == "int16":
        return Volume(geometry, grid)
    if token == "uint8":
        return BinaryMask(geometry, grid != 0)
    return ProbMap(geometry, grid)


def write_volume(grid: Volume | BinaryMask | ProbMap, path) -> None:
    """Write the header + raw pair; read_volume(path) reproduces the grid bit-exactly."""
    path = Path(path)
    if isinstance(grid, Volume):
        token, payload = "int16", grid.voxels.astype("<i2")
    elif isinstance(grid, BinaryMask):
        token, payload = "uint8", grid.voxels.astype("u1")
    elif isinstance(grid, ProbMap):
        token, payload = "float32", grid.voxels.astype("<f4")
    else:
        raise DataError(f"cannot write grid of type {type(grid).__name__}")

    raw_name = path.stem + ".raw"
    nx, ny, nz = grid.geometry.dims
    sx, sy, sz = grid.geometry.spacing
    header = (
        f"dims: {nx} {ny} {nz}\n"
        f"spacing: {sx!r} {sy!r} {sz!r}\n"  # repr round-trips floats exactly
        f"dtype: {token}\n"
        f"data: {raw_name}\n"
    )
    path.write_text(header)
    (path.parent / raw_name).write_bytes(np.ascontiguousarray(payload).tobytes())
