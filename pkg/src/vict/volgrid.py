"""CT voxel grids: geometry, volumes, binary masks, and HU thresholding.

Index convention: integer indices address voxel centers, and the grid
geometry maps index (i, j, k) to the physical position

    origin + direction @ (spacing * (i, j, k))

in millimeters (LPS). The inverse mapping rounds to the nearest voxel
center with half-way ties resolved toward +infinity per component.
"""

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError

_ORTHO_TOL = 1e-9


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GridGeometry:
    """Physical placement of a voxel grid: origin, spacing, direction, dims.

    ``direction`` must be a proper rotation (orthonormal columns,
    determinant +1); mirrored grids are rejected. ``spacing`` is mm per
    voxel along each grid axis and must be strictly positive.
    """

    origin: np.ndarray
    spacing: np.ndarray
    direction: np.ndarray
    dims: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", _readonly(np.asarray(self.origin, dtype=np.float64).reshape(3)))
        object.__setattr__(self, "spacing", _readonly(np.asarray(self.spacing, dtype=np.float64).reshape(3)))
        object.__setattr__(self, "direction", _readonly(np.asarray(self.direction, dtype=np.float64).reshape(3, 3)))
        object.__setattr__(self, "dims", _readonly(np.asarray(self.dims, dtype=np.int64).reshape(3)))
        if not np.all(np.isfinite(self.origin)):
            raise GeometryError("origin has non-finite components")
        if not np.all(self.spacing > 0):
            raise GeometryError(f"spacing must be strictly positive, got {self.spacing.tolist()}")
        if not np.all(self.dims > 0):
            raise GeometryError(f"dims must be positive, got {self.dims.tolist()}")
        d = self.direction
        if not np.all(np.isfinite(d)):
            raise GeometryError("direction has non-finite components")
        gram = d.T @ d
        if not np.allclose(gram, np.eye(3), rtol=0.0, atol=_ORTHO_TOL):
            raise GeometryError("direction columns are not orthonormal to within 1e-9")
        det = float(np.linalg.det(d))
        if abs(det - 1.0) > _ORTHO_TOL:
            raise GeometryError(f"direction must be a proper rotation (det +1), got det {det!r}")

    def __eq__(self, other):
        if not isinstance(other, GridGeometry):
            return NotImplemented
        return (
            np.array_equal(self.origin, other.origin)
            and np.array_equal(self.spacing, other.spacing)
            and np.array_equal(self.direction, other.direction)
            and np.array_equal(self.dims, other.dims)
        )

    def __hash__(self):
        return hash((self.origin.tobytes(), self.spacing.tobytes(), self.direction.tobytes(), self.dims.tobytes()))

    @property
    def voxel_count(self) -> int:
        return int(np.prod(self.dims))

    @property
    def mean_spacing(self) -> float:
        """Average of the three spacing components, in mm."""
        return float(np.mean(self.spacing))


@dataclass(frozen=True, eq=False)
class CtVolume:
    """Dense HU-valued scalar grid with its geometry.

    Values are stored bit-exactly in their integral (or float32) dtype;
    all geometry math runs in float64.
    """

    geometry: GridGeometry
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.dtype not in (np.dtype(np.int16), np.dtype(np.int32), np.dtype(np.float32)):
            raise GeometryError(f"unsupported volume dtype {v.dtype}; expected int16, int32 or float32")
        dims = tuple(self.geometry.dims)
        if v.size != self.geometry.voxel_count:
            raise GeometryError(f"values size {v.size} does not match dims {dims}")
        object.__setattr__(self, "values", _readonly(v.reshape(dims)))

    def __eq__(self, other):
        if not isinstance(other, CtVolume):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class VoxelMask:
    """Binary occupancy grid sharing a volume's geometry."""

    geometry: GridGeometry
    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.size != self.geometry.voxel_count:
            raise GeometryError(f"bits size {b.size} does not match dims {tuple(self.geometry.dims)}")
        object.__setattr__(self, "bits", _readonly(b.reshape(tuple(self.geometry.dims)).astype(bool, copy=False)))

    def _check_same_grid(self, other: "VoxelMask") -> None:
        if self.geometry != other.geometry:
            raise GeometryError("masks live on different grids; refusing to combine without resampling")

    def __and__(self, other: "VoxelMask") -> "VoxelMask":
        self._check_same_grid(other)
        return VoxelMask(self.geometry, self.bits & other.bits)

    def __or__(self, other: "VoxelMask") -> "VoxelMask":
        self._check_same_grid(other)
        return VoxelMask(self.geometry, self.bits | other.bits)

    def __invert__(self) -> "VoxelMask":
        return VoxelMask(self.geometry, ~self.bits)

    def __eq__(self, other):
        if not isinstance(other, VoxelMask):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.bits, other.bits)

    __hash__ = None

    def count(self) -> int:
        return int(np.count_nonzero(self.bits))


def continuous_index_to_physical(geom: GridGeometry, index) -> np.ndarray:
    """Map fractional grid indices (no bounds check) to physical mm."""
    idx = np.asarray(index, dtype=np.float64)
    return geom.origin + (idx * geom.spacing) @ geom.direction.T


def index_to_physical(geom: GridGeometry, index) -> np.ndarray:
    """Map integer voxel indices to the physical position of their centers.

    Accepts a single (3,) index or an (n, 3) batch. Raises on any index
    outside [0, dims).
    """
    idx = np.asarray(index)
    if not np.issubdtype(idx.dtype, np.integer):
        raise GeometryError(f"expected integer index, got dtype {idx.dtype}")
    flat = idx.reshape(-1, 3)
    bad_rows = np.any((flat < 0) | (flat >= geom.dims), axis=1)
    if np.any(bad_rows):
        bad = flat[int(np.argmax(bad_rows))]
        raise GeometryError(f"index {bad.tolist()} outside grid dims {geom.dims.tolist()}")
    return continuous_index_to_physical(geom, idx)


def physical_to_continuous_index(geom: GridGeometry, point) -> np.ndarray:
    p = np.asarray(point, dtype=np.float64)
    return ((p - geom.origin) @ geom.direction) / geom.spacing


def round_half_up(x: np.ndarray) -> np.ndarray:
    """Nearest integer with .5 ties toward +infinity (not banker's)."""
    return np.floor(x + 0.5)


def physical_to_index(geom: GridGeometry, point):
    """Map a physical point to the index of the nearest voxel center.

    Returns a (3,) int array, or None when the rounded index falls
    outside the grid.
    """
    u = physical_to_continuous_index(geom, point)
    idx = round_half_up(u).astype(np.int64)
    if np.any(idx < 0) or np.any(idx >= geom.dims):
        return None
    return idx


def physical_to_index_batch(geom: GridGeometry, points: np.ndarray):
    """Vectorized physical_to_index: returns (indices, in_bounds mask)."""
    u = physical_to_continuous_index(geom, points)
    idx = round_half_up(u).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < geom.dims), axis=-1)
    return idx, ok


def threshold_mask(vol: CtVolume, tau: float) -> VoxelMask:
    """Binary anatomy mask: bit set where the HU value exceeds tau."""
    return VoxelMask(vol.geometry, vol.values > tau)


def mask_to_volume(mask: VoxelMask) -> CtVolume:
    """Encode a mask as a 0/1 int16 volume (the on-disk mask carrier)."""
    return CtVolume(mask.geometry, mask.bits.astype(np.int16))


def volume_to_mask(vol: CtVolume) -> VoxelMask:
    """Interpret a 0/1 volume written by :func:`mask_to_volume`."""
    return VoxelMask(vol.geometry, vol.values != 0)
