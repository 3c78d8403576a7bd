import numpy as np
import pytest

from vict import CtVolume, GridGeometry, PhantomSpec, Shape, VoxelMask


@pytest.fixture
def rng():
    return np.random.default_rng(20260808)


@pytest.fixture
def unit_geom():
    """8x8x8 grid, 1 mm isotropic, identity orientation at the origin."""
    return GridGeometry(origin=(0, 0, 0), spacing=(1, 1, 1), direction=np.eye(3), dims=(8, 8, 8))


def make_geom(dims=(8, 8, 8), spacing=(1, 1, 1), origin=(0, 0, 0), direction=None):
    return GridGeometry(
        origin=origin,
        spacing=spacing,
        direction=np.eye(3) if direction is None else direction,
        dims=dims,
    )


def make_volume(geom, fill=700):
    return CtVolume(geom, np.full(tuple(geom.dims), fill, dtype=np.int16))


def make_mask(geom, bits=None):
    if bits is None:
        bits = np.zeros(tuple(geom.dims), dtype=bool)
    return VoxelMask(geom, bits)


def random_rotation(rng):
    """Uniform random rotation matrix from a normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def small_phantom_spec(perturb=None, dims=(48, 48, 48)):
    """Compact two-interval phantom used across test modules."""
    return PhantomSpec(
        dims=dims,
        spacing=(1.0, 1.0, 1.0),
        cavities=(Shape("sphere", (18, 24, 24), (7, 7, 7)),),
        resections=(
            (Shape("sphere", (26, 24, 24), (8, 8, 8)),),
            (Shape("ellipsoid", (32, 26, 24), (8, 6, 6)),),
        ),
        perturb=perturb,
    )
