"""Deterministic synthetic chest phantoms with exact lung and lesion masks.

A case is an elliptic body cylinder on an air background, two ellipsoidal
lungs (jittered per case), and, for covid cases, textured blob lesions inside
the lungs. Lesions are lung tissue: the lung mask always contains them. A
mild in-plane blur creates partial-volume ramps at tissue boundaries and
Gaussian HU noise is added voxelwise.

All randomness comes from one generator per case with a fixed draw order:
body jitter, tissue HU levels, the two lungs, then per lesion (parent lung,
center, radius, sphere jitters), the lesion texture, and finally the noise
field. Dataset-level case seeds derive from SeedSequence([seed, case_index]),
so generation is reproducible regardless of scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DataError
from .volumes import BinaryMask, Geometry, Volume, read_volume, write_volume

_MAX_PLACEMENT_TRIES = 8


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (128, 96, 12)
    spacing: tuple[float, float, float] = (1.0, 1.0, 5.0)
    n_lesions_min: int = 1
    n_lesions_max: int = 4
    lesion_radius_min: float = 0.05  # fraction of the parent lung's width
    lesion_radius_max: float = 0.25
    hu_air: float = -1000.0
    hu_body_mean: float = 40.0
    hu_body_jitter: float = 30.0
    hu_lung_mean: float = -850.0
    hu_lung_jitter: float = 40.0
    hu_lesion_low: float = -600.0
    hu_lesion_high: float = -100.0
    noise_std: float = 20.0
    smooth_sigma: float = 0.7  # in-plane partial-volume blur, voxels

    def __post_init__(self):
        if any(d < 4 for d in self.dims):
            raise DataError(f"phantom dims too small: {self.dims}")
        if not self.hu_lung_mean < self.hu_lesion_low <= self.hu_lesion_high < self.hu_body_mean:
            raise DataError(
                "lesion HU range must sit strictly between the lung and body means"
            )
        if not 0 < self.lesion_radius_min <= self.lesion_radius_max:
            raise DataError("invalid lesion radius range")
        if not 0 <= self.n_lesions_min <= self.n_lesions_max:
            raise DataError("invalid lesion count range")


@dataclass
class PhantomCase:
    case_id: str
    label: str  # "normal" or "covid"
    seed: int
    ct: Volume
    lung_mask: BinaryMask
    lesion_mask: BinaryMask


def _ellipsoid(grids, center, semi_axes) -> np.ndarray:
    zz, yy, xx = grids
    cx, cy, cz = center
    ax, ay, az = semi_axes
    return (
        ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 + ((zz - cz) / az) ** 2
    ) <= 1.0


def _sample_in_ball(rng, radius: float) -> np.ndarray:
    while True:
        u = rng.uniform(-radius, radius, size=3)
        if float(u @ u) <= radius * radius:
            return u


def _make_lesion(rng, cfg, grids, lung_center, lung_axes, lung_mask) -> np.ndarray:
    """One textured blob: a union of jittered spheres clipped to the lung."""
    cx, cy, cz = lung_center
    ax, ay, az = lung_axes
    for _ in range(_MAX_PLACEMENT_TRIES):
        u = _sample_in_ball(rng, 0.7)
        center = np.array([cx + u[0] * ax, cy + u[1] * ay, cz + u[2] * az])
        frac = rng.uniform(cfg.lesion_radius_min, cfg.lesion_radius_max)
        radius = frac * 2.0 * ax
        blob = np.zeros_like(lung_mask)
        for _ in range(3):
            offset = rng.uniform(-0.5, 0.5, size=3) * radius
            r = radius * rng.uniform(0.6, 1.0)
            rz = max(1.0, 0.5 * r)  # thick slices flatten lesions in z
            blob |= _ellipsoid(
                grids,
                (center[0] + offset[0], center[1] + offset[1], center[2] + 0.4 * offset[2]),
                (r, r, rz),
            )
        blob &= lung_mask
        if blob.any():
            return blob
    return np.zeros_like(lung_mask)


def generate_case(cfg: PhantomConfig, label: str, seed: int) -> PhantomCase:
    """Build one phantom; identical (cfg, label, seed) yields a bit-identical case."""
    if label not in ("normal", "covid"):
        raise DataError(f"label must be 'normal' or 'covid', got {label!r}")
    nx, ny, nz = cfg.dims
    rng = np.random.default_rng(seed)
    zz, yy, xx = np.ogrid[0:nz, 0:ny, 0:nx]
    grids = (zz, yy, xx)

    body_center = (nx / 2 + rng.uniform(-2, 2), ny / 2 + rng.uniform(-2, 2), nz / 2)
    body_axes = (
        0.42 * nx * (1 + rng.uniform(-0.05, 0.05)),
        0.42 * ny * (1 + rng.uniform(-0.05, 0.05)),
        10.0 * nz,  # effectively a cylinder through all slices
    )
    hu_body = rng.normal(cfg.hu_body_mean, cfg.hu_body_jitter)
    hu_lung = rng.normal(cfg.hu_lung_mean, cfg.hu_lung_jitter)

    body = _ellipsoid(grids, body_center, body_axes)
    lung = np.zeros((nz, ny, nx), dtype=bool)
    lung_params = []
    for side in (-1.0, 1.0):
        center = (
            nx / 2 + side * 0.22 * nx + rng.uniform(-1.5, 1.5),
            ny / 2 + rng.uniform(-1.5, 1.5),
            nz / 2 + rng.uniform(-0.5, 0.5),
        )
        axes = (
            0.16 * nx * (1 + rng.uniform(-0.08, 0.08)),
            0.25 * ny * (1 + rng.uniform(-0.08, 0.08)),
            0.42 * nz * (1 + rng.uniform(-0.08, 0.08)),
        )
        lung |= _ellipsoid(grids, center, axes)
        lung_params.append((center, axes))
    lung &= body  # lungs cannot poke outside the body

    lesion = np.zeros((nz, ny, nx), dtype=bool)
    if label == "covid":
        n_lesions = int(rng.integers(cfg.n_lesions_min, cfg.n_lesions_max + 1))
        for _ in range(n_lesions):
            which = int(rng.integers(0, 2))
            center, axes = lung_params[which]
            blob = _make_lesion(rng, cfg, grids, center, axes, lung)
            if not blob.any():
                # placement kept failing in this geometry: restart with a sub-seed
                return generate_case(cfg, label, seed + 1)
            lesion |= blob

    hu = np.full((nz, ny, nx), cfg.hu_air, dtype=np.float64)
    hu[body] = hu_body
    hu[lung] = hu_lung
    n_lesion_voxels = int(np.count_nonzero(lesion))
    if n_lesion_voxels:
        hu[lesion] = rng.uniform(cfg.hu_lesion_low, cfg.hu_lesion_high, n_lesion_voxels)
    if cfg.smooth_sigma > 0:
        hu = gaussian_filter(hu, sigma=(0.0, cfg.smooth_sigma, cfg.smooth_sigma))
    hu += rng.normal(0.0, cfg.noise_std, hu.shape)

    geometry = Geometry(cfg.dims, cfg.spacing)
    return PhantomCase(
        case_id=f"{label}_{seed}",
        label=label,
        seed=seed,
        ct=Volume(geometry, np.rint(hu).astype(np.int16)),
        lung_mask=BinaryMask(geometry, lung),
        lesion_mask=BinaryMask(geometry, lesion),
    )


def _case_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1, np.uint32)[0])


@dataclass
class DatasetCase:
    """One index entry; grids load lazily from the referenced files."""

    case_id: str
    label: str
    ct_path: Path
    lung_path: Path
    lesion_path: Path

    def load_ct(self) -> Volume:
        grid = read_volume(self.ct_path)
        if not isinstance(grid, Volume):
            raise DataError(f"{self.ct_path}: expected an int16 CT volume")
        return grid

    def load_lung(self) -> BinaryMask:
        grid = read_volume(self.lung_path)
        if not isinstance(grid, BinaryMask):
            raise DataError(f"{self.lung_path}: expected a uint8 mask")
        return grid

    def load_lesion(self) -> BinaryMask:
        grid = read_volume(self.lesion_path)
        if not isinstance(grid, BinaryMask):
            raise DataError(f"{self.lesion_path}: expected a uint8 mask")
        return grid


def generate_dataset(cfg: PhantomConfig, n_normal: int, n_covid: int, seed: int, out_dir) -> Path:
    """Write n_normal + n_covid cases and an index file; returns the index path.

    Index lines are ``id label ct.vhdr lung.vhdr lesion.vhdr`` with paths
    relative to the index. Regeneration with the same seed is byte-identical.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    labels = ["normal"] * n_normal + ["covid"] * n_covid
    counters = {"normal": 0, "covid": 0}
    for index, label in enumerate(labels):
        case = generate_case(cfg, label, _case_seed(seed, index))
        case_id = f"{label}_{counters[label]:03d}"
        counters[label] += 1
        names = {}
        for kind, grid in (
            ("ct", case.ct),
            ("lung", case.lung_mask),
            ("lesion", case.lesion_mask),
        ):
            name = f"{case_id}_{kind}.vhdr"
            write_volume(grid, out_dir / name)
            names[kind] = name
        lines.append(f"{case_id} {label} {names['ct']} {names['lung']} {names['lesion']}")
    index_path = out_dir / "index.txt"
    index_path.write_text("\n".join(lines) + "\n")
    return index_path


def read_index(index_path) -> list[DatasetCase]:
    """Parse a dataset index into lazily-loading case records."""
    index_path = Path(index_path)
    if not index_path.is_file():
        raise DataError(f"dataset index not found: {index_path}")
    cases = []
    root = index_path.parent
    for lineno, raw in enumerate(index_path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise DataError(f"{index_path}:{lineno}: expected 5 fields, got {raw!r}")
        case_id, label, ct_name, lung_name, lesion_name = parts
        if label not in ("normal", "covid"):
            raise DataError(f"{index_path}:{lineno}: unknown label {label!r}")
        cases.append(
            DatasetCase(case_id, label, root / ct_name, root / lung_name, root / lesion_name)
        )
    if not cases:
        raise DataError(f"{index_path}: no cases listed")
    return cases
