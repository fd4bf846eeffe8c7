import numpy as np
import pytest

from covidseg.errors import DataError
from covidseg.preprocess import (
    BoundingBox,
    PreprocessConfig,
    bounding_box,
    extract_training_slices,
    normalize_hu,
    resize_bilinear,
    resize_nearest,
    unresize_to_original,
    SliceProvenance,
)
from covidseg.volumes import BinaryMask, Geometry, Volume

from conftest import make_geometry, random_mask


def test_config_invariants():
    with pytest.raises(DataError):
        PreprocessConfig(hu_min=200, hu_max=-1000)
    with pytest.raises(DataError):
        PreprocessConfig(target_rows=1)


def make_volume(values):
    arr = np.asarray(values, dtype=np.int16)
    nz, ny, nx = arr.shape
    return Volume(Geometry((nx, ny, nz)), arr)


def test_normalize_hu_window_endpoints():
    vol = make_volume([[[-1000, 200, -400, -1500, 500, 0]]])
    out = normalize_hu(vol, PreprocessConfig()).voxels[0, 0]
    assert out[0] == 0.0  # window low end
    assert out[1] == 1.0  # window high end
    assert out[2] == pytest.approx(0.5)
    assert out[3] == 0.0 and out[4] == 1.0  # clamped
    assert out[5] == pytest.approx(1000 / 1200)


def test_normalize_hu_monotone(rng):
    hu = np.sort(rng.integers(-2000, 1000, 50)).astype(np.int16)
    vol = make_volume(hu.reshape(1, 1, 50))
    out = normalize_hu(vol, PreprocessConfig()).voxels[0, 0]
    assert (np.diff(out) >= 0).all()
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_bounding_box_single_voxel():
    g = make_geometry(8, 8, 8)
    voxels = np.zeros(g.shape_zyx, bool)
    voxels[5, 4, 3] = True  # (x, y, z) = (3, 4, 5)
    box = bounding_box(BinaryMask(g, voxels), 0)
    assert box == BoundingBox(3, 3, 4, 4, 5, 5)


def test_bounding_box_all_true_and_margin():
    g = make_geometry(4, 5, 6)
    box = bounding_box(BinaryMask(g, np.ones(g.shape_zyx, bool)), 0)
    assert box == BoundingBox(0, 3, 0, 4, 0, 5)
    # margin clips at volume bounds
    assert bounding_box(BinaryMask(g, np.ones(g.shape_zyx, bool)), 3) == box


def test_bounding_box_empty_mask():
    g = make_geometry(3, 3, 3)
    with pytest.raises(DataError, match="no true voxels"):
        bounding_box(BinaryMask(g, np.zeros(g.shape_zyx, bool)), 0)


def test_bounding_box_matches_exhaustive_scan(rng):
    g = make_geometry(7, 6, 5)
    for _ in range(50):
        mask = random_mask(rng, g, p=0.1, nonempty=True)
        box = bounding_box(mask, 0)
        xs, ys, zs = [], [], []
        for z in range(5):
            for y in range(6):
                for x in range(7):
                    if mask.voxels[z, y, x]:
                        xs.append(x), ys.append(y), zs.append(z)
        assert (box.x0, box.x1) == (min(xs), max(xs))
        assert (box.y0, box.y1) == (min(ys), max(ys))
        assert (box.z0, box.z1) == (min(zs), max(zs))
        # containment: every true voxel inside the box
        assert mask.voxels[box.slices_zyx()].sum() == mask.voxels.sum()


def test_resize_constant_and_midpoint():
    const = np.full((4, 7), 3.25, dtype=np.float32)
    out = resize_bilinear(const, 9, 5)
    assert out.shape == (9, 5) and np.allclose(out, 3.25)

    grid = np.array([[0.0, 1.0], [0.0, 1.0]])
    out = resize_bilinear(grid, 3, 3)
    assert np.allclose(out[:, 1], 0.5)
    assert np.allclose(out[:, 0], 0.0) and np.allclose(out[:, 2], 1.0)


def test_resize_identity_bit_exact(rng):
    grid = rng.random((13, 9)).astype(np.float32)
    out = resize_bilinear(grid, 13, 9)
    assert out.tobytes() == grid.tobytes()
    near = resize_nearest(grid, 13, 9)
    assert near.tobytes() == grid.tobytes()


def test_resize_no_overshoot(rng):
    for _ in range(20):
        grid = rng.random((5, 6))
        out = resize_bilinear(grid, 11, 17)
        assert out.min() >= grid.min() - 1e-12
        assert out.max() <= grid.max() + 1e-12


def test_resize_exact_for_affine_images():
    rows, cols = 6, 9
    r, c = np.mgrid[0:rows, 0:cols].astype(np.float64)
    grid = 2.0 * r - 0.5 * c + 3.0
    out = resize_bilinear(grid, 11, 15)
    rr = np.arange(11) * (rows - 1) / 10.0
    cc = np.arange(15) * (cols - 1) / 14.0
    expected = 2.0 * rr[:, None] - 0.5 * cc[None, :] + 3.0
    assert np.allclose(out, expected, atol=1e-12)


def test_resize_degenerate_source():
    with pytest.raises(DataError):
        resize_bilinear(np.ones((1, 5)), 3, 3)


def test_resize_nearest_keeps_masks_binary(rng):
    mask = rng.random((6, 8)) > 0.5
    out = resize_nearest(mask, 11, 13)
    assert out.dtype == bool and out.shape == (11, 13)


def _blob_case(rng, nx=20, ny=16, nz=6):
    g = Geometry((nx, ny, nz))
    zz, yy, xx = np.ogrid[0:nz, 0:ny, 0:nx]
    cz, cy, cx = nz / 2, ny / 2 + rng.uniform(-2, 2), nx / 2 + rng.uniform(-3, 3)
    lung = ((xx - cx) / 6) ** 2 + ((yy - cy) / 5) ** 2 + ((zz - cz) / 2.5) ** 2 <= 1.0
    hu = np.where(lung, -850, 40).astype(np.int16)
    return Volume(g, hu), BinaryMask(g, lung)


def test_extract_training_slices_shapes(rng):
    vol, lung = _blob_case(rng)
    cfg = PreprocessConfig(target_rows=12, target_cols=18)
    pairs = extract_training_slices(vol, lung, cfg, "case0")
    box = bounding_box(lung, 0)
    assert len(pairs) == box.z1 - box.z0 + 1
    for norm_slice, mask in pairs:
        assert norm_slice.pixels.shape == (12, 18)
        assert norm_slice.pixels.min() >= 0 and norm_slice.pixels.max() <= 1
        assert mask.dtype == bool
        assert norm_slice.provenance.slice_shape == (16, 20)


def test_unresize_constant_fill():
    box = BoundingBox(2, 5, 1, 3, 0, 0)
    prov = SliceProvenance("v", 0, box, (6, 8))
    grid = np.full((10, 12), 0.5, dtype=np.float32)
    out = unresize_to_original(grid, prov, "probability")
    assert out.shape == (6, 8)
    inside = out[1:4, 2:6]
    assert np.allclose(inside, 0.5)
    outside = out.copy()
    outside[1:4, 2:6] = 0
    assert (outside == 0).all()


def test_unresize_identity_when_uncropped(rng):
    grid = rng.random((6, 8)).astype(np.float32)
    prov = SliceProvenance("v", 0, BoundingBox(0, 7, 0, 5, 0, 0), (6, 8))
    out = unresize_to_original(grid, prov, "probability")
    assert out.tobytes() == grid.tobytes()


def test_mask_round_trip_dice(rng):
    # crop + resize + inverse keeps smooth blobs nearly intact
    for trial in range(10):
        vol, lung = _blob_case(rng)
        cfg = PreprocessConfig(target_rows=24, target_cols=28)
        pairs = extract_training_slices(vol, lung, cfg, "case")
        total_inter = total_a = total_b = 0
        for norm_slice, mask in pairs:
            back = unresize_to_original(mask, norm_slice.provenance, "mask")
            orig = lung.voxels[norm_slice.provenance.z]
            total_inter += int(np.count_nonzero(back & orig))
            total_a += int(np.count_nonzero(back))
            total_b += int(np.count_nonzero(orig))
        dice = 2 * total_inter / (total_a + total_b)
        assert dice >= 0.95


def test_unresize_provenance_restores_dims(rng):
    vol, lung = _blob_case(rng, nx=17, ny=13, nz=4)
    cfg = PreprocessConfig(target_rows=9, target_cols=11)
    pairs = extract_training_slices(vol, lung, cfg, "case")
    out = unresize_to_original(pairs[0][0].pixels, pairs[0][0].provenance, "probability")
    assert out.shape == (13, 17)
