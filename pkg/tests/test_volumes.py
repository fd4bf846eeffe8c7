import numpy as np
import pytest

from covidseg.errors import DataError
from covidseg.volumes import (
    BinaryMask,
    Geometry,
    ProbMap,
    Volume,
    mask_volume_count,
    read_volume,
    require_same_geometry,
    write_volume,
)

from conftest import make_geometry, random_mask, random_prob, random_volume


def test_geometry_invariants():
    with pytest.raises(DataError):
        Geometry((0, 2, 2))
    with pytest.raises(DataError):
        Geometry((2, 2, 2), (1.0, 0.0, 1.0))
    g = Geometry((2, 3, 4))
    assert g.voxel_count == 24
    assert g.shape_zyx == (4, 3, 2)


def test_grid_shape_must_match_geometry():
    with pytest.raises(DataError):
        Volume(make_geometry(2, 2, 2), np.zeros((2, 2, 3), dtype=np.int16))


def test_probmap_rejects_out_of_range():
    g = make_geometry(2, 2, 1)
    with pytest.raises(DataError):
        ProbMap(g, np.full(g.shape_zyx, 1.5, dtype=np.float32))
    with pytest.raises(DataError):
        ProbMap(g, np.full(g.shape_zyx, -0.1, dtype=np.float32))


def test_grids_are_immutable():
    g = make_geometry(2, 2, 1)
    vol = Volume(g, np.zeros(g.shape_zyx, dtype=np.int16))
    with pytest.raises(ValueError):
        vol.voxels[0, 0, 0] = 5


def test_read_mask_example(tmp_path):
    # header "dims: 2 2 1, dtype: uint8" + bytes [0,1,1,0] -> 2 true voxels
    (tmp_path / "m.vhdr").write_text("dims: 2 2 1\ndtype: uint8\ndata: m.raw\n")
    (tmp_path / "m.raw").write_bytes(bytes([0, 1, 1, 0]))
    grid = read_volume(tmp_path / "m.vhdr")
    assert isinstance(grid, BinaryMask)
    assert mask_volume_count(grid) == 2
    # nonzero bytes read as true
    (tmp_path / "m.raw").write_bytes(bytes([0, 7, 255, 0]))
    assert mask_volume_count(read_volume(tmp_path / "m.vhdr")) == 2


def test_read_single_voxel_volume(tmp_path):
    (tmp_path / "v.vhdr").write_text("dims: 1 1 1\ndtype: int16\ndata: v.raw\n")
    (tmp_path / "v.raw").write_bytes(np.array([-1000], dtype="<i2").tobytes())
    grid = read_volume(tmp_path / "v.vhdr")
    assert isinstance(grid, Volume)
    assert grid.voxels[0, 0, 0] == -1000


def test_round_trip_all_kinds(tmp_path, rng):
    g = make_geometry(5, 4, 3, spacing=(0.7, 1.25, 5.0))
    grids = [random_volume(rng, g), random_mask(rng, g), random_prob(rng, g)]
    for i, grid in enumerate(grids):
        path = tmp_path / f"g{i}.vhdr"
        write_volume(grid, path)
        back = read_volume(path)
        assert type(back) is type(grid)
        assert back.geometry == grid.geometry
        assert np.array_equal(back.voxels, grid.voxels)


def test_round_trip_probmap_bit_exact(tmp_path, rng):
    # float32 payload must survive untouched
    g = make_geometry(4, 4, 2)
    prob = random_prob(rng, g)
    write_volume(prob, tmp_path / "p.vhdr")
    back = read_volume(tmp_path / "p.vhdr")
    assert back.voxels.tobytes() == prob.voxels.tobytes()


def test_write_all_half_probmap(tmp_path):
    g = make_geometry(3, 2, 1)
    write_volume(ProbMap(g, np.full(g.shape_zyx, 0.5, dtype=np.float32)), tmp_path / "h.vhdr")
    raw = np.frombuffer((tmp_path / "h.raw").read_bytes(), dtype="<f4")
    assert raw.shape == (6,) and (raw == 0.5).all()


def test_read_errors(tmp_path):
    with pytest.raises(DataError):
        read_volume(tmp_path / "missing.vhdr")

    (tmp_path / "bad.vhdr").write_text("dims: 2 2 1\ndtype: float64\ndata: bad.raw\n")
    (tmp_path / "bad.raw").write_bytes(b"\x00" * 32)
    with pytest.raises(DataError, match="dtype"):
        read_volume(tmp_path / "bad.vhdr")

    (tmp_path / "short.vhdr").write_text("dims: 2 2 2\ndtype: uint8\ndata: short.raw\n")
    (tmp_path / "short.raw").write_bytes(b"\x00" * 5)
    with pytest.raises(DataError, match="bytes"):
        read_volume(tmp_path / "short.vhdr")

    (tmp_path / "range.vhdr").write_text("dims: 1 1 1\ndtype: float32\ndata: range.raw\n")
    (tmp_path / "range.raw").write_bytes(np.array([1.5], dtype="<f4").tobytes())
    with pytest.raises(DataError, match=r"\[0, 1\]"):
        read_volume(tmp_path / "range.vhdr")

    (tmp_path / "nohdr.vhdr").write_text("dims: 1 1 1\n")
    with pytest.raises(DataError, match="missing"):
        read_volume(tmp_path / "nohdr.vhdr")


def test_empty_dims_rejected_before_write(tmp_path):
    with pytest.raises(DataError):
        Geometry((0, 0, 0))


def test_mask_volume_count(rng):
    g = make_geometry(2, 2, 2)
    assert mask_volume_count(BinaryMask(g, np.zeros(g.shape_zyx, bool))) == 0
    assert mask_volume_count(BinaryMask(g, np.ones(g.shape_zyx, bool))) == 8
    for _ in range(20):
        m = random_mask(rng, g)
        brute = sum(
            1
            for z in range(2)
            for y in range(2)
            for x in range(2)
            if m.voxels[z, y, x]
        )
        assert mask_volume_count(m) == brute


def test_geometry_pairing_check(rng):
    a = random_mask(rng, make_geometry(4, 4, 2))
    b = random_mask(rng, make_geometry(4, 4, 3))
    with pytest.raises(DataError, match="geometry"):
        require_same_geometry(a, b)
    c = random_mask(rng, make_geometry(4, 4, 2, spacing=(2.0, 1.0, 1.0)))
    with pytest.raises(DataError, match="geometry"):
        require_same_geometry(a, c)
