"""Ray-based voxelization of a surface reconstruction into the CT grid.

For every mesh vertex a ray is marched from the camera origin to the
vertex at a fixed physical step, every sample is snapped to its nearest
voxel, and the hit voxels form a sparse occupancy scaffold. Binary
dilation, morphological closing and hole filling then turn the scaffold
into a solid, watertight mask on the same grid.

The sampling loop is the hot path; see :mod:`vict.accel` for how the
numba kernel and the numpy fallback are selected.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import accel
from .errors import GeometryError
from .geomio import FiducialSet, TriMesh
from .volgrid import GridGeometry, VoxelMask

# rays shorter than this have no usable direction
DEGENERATE_LENGTH = 1e-9

_NUMPY_CHUNK = 4096  # vertices per block in the fallback path


@dataclass(frozen=True)
class RayVoxParams:
    """Sampling and solidification parameters.

    ``step`` is the physical sample spacing along rays (mm); use
    :func:`default_step` for the half-minimum-spacing default that
    guarantees consecutive samples cannot skip a voxel. The morphology
    radii are in voxels.
    """

    step: float
    dilation_radius: int = 1
    closing_radius: int = 2
    fill_holes: bool = True

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError(f"ray step must be positive, got {self.step}")
        if self.dilation_radius < 0 or self.closing_radius < 0:
            raise ValueError("morphology radii must be >= 0")


def default_step(geom: GridGeometry) -> float:
    return 0.5 * float(np.min(geom.spacing))


if accel.HAVE_NUMBA:
    import numba

    @numba.njit(cache=True, parallel=True)
    def _trace_kernel(verts, cam, origin, direction, spacing, step, grid):  # pragma: no cover - jit
        nx, ny, nz = grid.shape
        d00, d01, d02 = direction[0, 0], direction[0, 1], direction[0, 2]
        d10, d11, d12 = direction[1, 0], direction[1, 1], direction[1, 2]
        d20, d21, d22 = direction[2, 0], direction[2, 1], direction[2, 2]
        sx, sy, sz = spacing[0], spacing[1], spacing[2]
        ox, oy, oz = origin[0], origin[1], origin[2]
        cx, cy, cz = cam[0], cam[1], cam[2]
        for m in numba.prange(verts.shape[0]):
            wx = verts[m, 0] - cx
            wy = verts[m, 1] - cy
            wz = verts[m, 2] - cz
            ell = np.sqrt(wx * wx + wy * wy + wz * wz)
            if ell < DEGENERATE_LENGTH:
                n_steps = -1  # camera sample only
                rx = ry = rz = 0.0
            else:
                n_steps = int(ell / step)
                rx = wx / ell
                ry = wy / ell
                rz = wz / ell
            for k in range(n_steps + 2):
                t = k * step if k <= n_steps else ell
                px = cx + t * rx
                py = cy + t * ry
                pz = cz + t * rz
                qx = px - ox
                qy = py - oy
                qz = pz - oz
                ux = (qx * d00 + qy * d10 + qz * d20) / sx
                uy = (qx * d01 + qy * d11 + qz * d21) / sy
                uz = (qx * d02 + qy * d12 + qz * d22) / sz
                ix = int(np.floor(ux + 0.5))
                iy = int(np.floor(uy + 0.5))
                iz = int(np.floor(uz + 0.5))
                if 0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz:
                    grid[ix, iy, iz] = 1
else:  # pragma: no cover - exercised when numba is absent
    _trace_kernel = None


def _trace_numpy(verts, cam, origin, direction, spacing, step, grid):
    """Pure-numpy twin of the jit kernel (same arithmetic, chunked)."""
    nx, ny, nz = grid.shape
    for lo in range(0, len(verts), _NUMPY_CHUNK):
        v = verts[lo: lo + _NUMPY_CHUNK]
        w = v - cam
        ell = np.sqrt(w[:, 0] ** 2 + w[:, 1] ** 2 + w[:, 2] ** 2)
        live = ell >= DEGENERATE_LENGTH
        d = np.zeros_like(w)
        d[live] = w[live] / ell[live, None]
        n_steps = np.where(live, (ell / step).astype(np.int64), -1)
        counts = n_steps + 2  # marched samples plus the exact endpoint
        ray_of = np.repeat(np.arange(len(v)), counts)
        k = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        t = k * step
        at_end = k == n_steps[ray_of] + 1
        t[at_end] = ell[ray_of][at_end]
        p = cam + t[:, None] * d[ray_of]
        q = p - origin
        ux = (q[:, 0] * direction[0, 0] + q[:, 1] * direction[1, 0] + q[:, 2] * direction[2, 0]) / spacing[0]
        uy = (q[:, 0] * direction[0, 1] + q[:, 1] * direction[1, 1] + q[:, 2] * direction[2, 1]) / spacing[1]
        uz = (q[:, 0] * direction[0, 2] + q[:, 1] * direction[1, 2] + q[:, 2] * direction[2, 2]) / spacing[2]
        ix = np.floor(ux + 0.5).astype(np.int64)
        iy = np.floor(uy + 0.5).astype(np.int64)
        iz = np.floor(uz + 0.5).astype(np.int64)
        ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
        grid[ix[ok], iy[ok], iz[ok]] = 1


def count_degenerate_vertices(mesh: TriMesh, camera) -> int:
    """Vertices too close to the camera to define a ray direction."""
    cam = np.asarray(camera, dtype=np.float64).reshape(3)
    w = mesh.vertices - cam
    ell = np.sqrt(np.sum(w * w, axis=1))
    return int(np.count_nonzero(ell < DEGENERATE_LENGTH))


def cast_rays(mesh: TriMesh, camera, geom: GridGeometry, step: float) -> VoxelMask:
    """March camera-to-vertex rays and mark every voxel a sample lands in.

    Samples are taken at t = 0, step, 2*step, ... plus the exact vertex
    endpoint; out-of-grid samples are skipped. Degenerate vertices
    (within 1e-9 mm of the camera) contribute only the camera sample;
    count them via :func:`count_degenerate_vertices` if needed.
    """
    if len(mesh.vertices) == 0:
        raise GeometryError("cannot cast rays from an empty mesh")
    cam = np.asarray(camera, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(cam)):
        raise GeometryError("camera origin has non-finite coordinates")
    if not step > 0:
        raise ValueError(f"ray step must be positive, got {step}")
    grid = np.zeros(tuple(geom.dims), dtype=np.uint8)
    verts = np.ascontiguousarray(mesh.vertices)
    if accel.NUMBA_ENABLED:
        _trace_kernel(verts, cam, geom.origin, geom.direction, geom.spacing, float(step), grid)
    else:
        _trace_numpy(verts, cam, geom.origin, geom.direction, geom.spacing, float(step), grid)
    return VoxelMask(geom, grid.astype(bool))


def ball_structure(radius: int) -> np.ndarray:
    """Discretized Euclidean ball in voxel units (anisotropy ignored)."""
    if radius <= 0:
        return np.ones((1, 1, 1), dtype=bool)
    r = int(radius)
    zz, yy, xx = np.mgrid[-r: r + 1, -r: r + 1, -r: r + 1]
    return (xx * xx + yy * yy + zz * zz) <= radius * radius


_FILL_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)  # 6-connectivity


def fill_enclosed_holes(bits: np.ndarray) -> np.ndarray:
    """Set background components not reachable from the grid boundary.

    Background connectivity is 6 so diagonal gaps do not leak.
    """
    return ndimage.binary_fill_holes(bits, structure=_FILL_CONNECTIVITY)


def solidify(mask: VoxelMask, params: RayVoxParams) -> VoxelMask:
    """Dilate, close, and hole-fill a ray scaffold into a solid mask.

    Dilation clips at the grid edge (outside counts as background); the
    erosion half of the closing treats outside as foreground so closing
    stays extensive and can never remove a scaffold voxel.
    """
    bits = mask.bits
    if params.dilation_radius > 0:
        bits = ndimage.binary_dilation(bits, structure=ball_structure(params.dilation_radius))
    if params.closing_radius > 0:
        ball = ball_structure(params.closing_radius)
        bits = ndimage.binary_erosion(
            ndimage.binary_dilation(bits, structure=ball), structure=ball, border_value=1
        )
    if params.fill_holes:
        bits = fill_enclosed_holes(bits)
    return VoxelMask(mask.geometry, bits)


def camera_point(camera) -> np.ndarray:
    """Extract the single camera origin from a fiducial set or 3-vector."""
    if isinstance(camera, FiducialSet):
        if len(camera.points) != 1:
            raise GeometryError(f"camera fiducial file must hold exactly one point, got {len(camera.points)}")
        return camera.points[0][1]
    return np.asarray(camera, dtype=np.float64).reshape(3)


def build_recon_mask(mesh: TriMesh, camera, geom: GridGeometry, params: RayVoxParams) -> VoxelMask:
    """Full reconstruction-supported occupancy mask on the CT grid."""
    return solidify(cast_rays(mesh, camera_point(camera), geom, params.step), params)
