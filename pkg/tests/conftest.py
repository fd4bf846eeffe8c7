import numpy as np
import pytest

from covidseg.volumes import BinaryMask, Geometry, ProbMap, Volume


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_geometry(nx=8, ny=8, nz=3, spacing=(1.0, 1.0, 1.0)):
    return Geometry((nx, ny, nz), spacing)


def random_mask(rng, geometry, p=0.5, nonempty=False):
    voxels = rng.random(geometry.shape_zyx) < p
    if nonempty and not voxels.any():
        flat = voxels.reshape(-1)
        flat[rng.integers(flat.size)] = True
        voxels = flat.reshape(geometry.shape_zyx)
    return BinaryMask(geometry, voxels)


def random_volume(rng, geometry, low=-1000, high=200):
    return Volume(geometry, rng.integers(low, high, geometry.shape_zyx).astype(np.int16))


def random_prob(rng, geometry):
    return ProbMap(geometry, rng.random(geometry.shape_zyx).astype(np.float32))
