import numpy as np
import pytest

from vict import GeometryError, RayVoxParams, TriMesh, VoxelMask, build_recon_mask, cast_rays, solidify
from vict.rayvox import _trace_numpy, ball_structure, camera_point, count_degenerate_vertices
from vict import accel
from vict.geomio import FiducialSet

from conftest import make_geom
from oracles import background_components, fill_holes_oracle

def _point_mesh(points):
    """Mesh whose only job is to carry ray target vertices."""
    pts = np.asarray(points, dtype=np.float64)
    tris = np.tile(np.array([[0, 1 % len(pts), 2 % len(pts)]]), (1, 1)) if len(pts) >= 3 else np.zeros((0, 3), int)
    return TriMesh(pts, tris)


def _tri_fan(points):
    pts = np.asarray(points, dtype=np.float64)
    tris = np.array([[0, i, i + 1] for i in range(1, len(pts) - 1)], dtype=np.int64)
    return TriMesh(pts, tris)


def test_vertex_at_camera_sets_that_voxel(unit_geom):
    mesh = _point_mesh([[3.0, 3.0, 3.0], [3.0, 3.0, 3.0], [3.0, 3.0, 3.0]])
    mask = cast_rays(mesh, (3.0, 3.0, 3.0), unit_geom, step=0.5)
    assert mask.count() == 1
    assert mask.bits[3, 3, 3]
    assert count_degenerate_vertices(mesh, (3.0, 3.0, 3.0)) == 3


def test_axis_ray_covers_every_voxel(unit_geom):
    mesh = _point_mesh([[5.0, 0.0, 0.0], [5.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
    mask = cast_rays(mesh, (0.0, 0.0, 0.0), unit_geom, step=0.5)
    assert mask.bits[0:6, 0, 0].all()
    assert mask.count() == 6


def test_endpoint_always_sampled(unit_geom, rng):
    # even with a step longer than every ray, each vertex voxel is set
    pts = rng.uniform(0.6, 6.4, size=(12, 3))
    mesh = _tri_fan(pts)
    mask = cast_rays(mesh, (3.5, 3.5, 3.5), unit_geom, step=50.0)
    for p in pts:
        idx = np.floor(p + 0.5).astype(int)
        assert mask.bits[idx[0], idx[1], idx[2]]


def test_out_of_grid_samples_skipped(unit_geom):
    mesh = _point_mesh([[30.0, 0.0, 0.0], [30.0, 0.0, 0.0], [30.0, 0.0, 0.0]])
    mask = cast_rays(mesh, (0.0, 0.0, 0.0), unit_geom, step=0.5)
    # ray exits the grid after x=7; nothing outside is recorded
    assert mask.bits[:, 0, 0].all()
    assert mask.count() == 8


def test_mesh_outside_grid_gives_empty_mask(unit_geom):
    mesh = _point_mesh([[50.0, 50.0, 50.0], [52.0, 50.0, 50.0], [50.0, 52.0, 50.0]])
    mask = cast_rays(mesh, (49.0, 49.0, 49.0), unit_geom, step=0.5)
    assert mask.count() == 0


def test_empty_mesh_rejected(unit_geom):
    with pytest.raises(GeometryError):
        cast_rays(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int)), (0, 0, 0), unit_geom, 0.5)


def test_bad_step_rejected(unit_geom):
    mesh = _point_mesh([[1.0, 0, 0], [1.0, 0, 0], [1.0, 0, 0]])
    with pytest.raises(ValueError):
        cast_rays(mesh, (0, 0, 0), unit_geom, 0.0)


def test_added_vertices_never_remove_voxels(unit_geom, rng):
    base = rng.uniform(0.5, 6.5, size=(10, 3))
    extra = rng.uniform(0.5, 6.5, size=(5, 3))
    m1 = cast_rays(_tri_fan(base), (3.5, 3.5, 3.5), unit_geom, 0.5)
    m2 = cast_rays(_tri_fan(np.vstack([base, extra])), (3.5, 3.5, 3.5), unit_geom, 0.5)
    assert not np.any(m1.bits & ~m2.bits)


def test_numba_and_numpy_paths_agree(rng):
    geom = make_geom(dims=(24, 20, 16), spacing=(0.8, 1.0, 1.3), origin=(-3.0, 2.0, 1.0))
    pts = rng.uniform([0, 2, 1], [15, 18, 18], size=(300, 3))
    mesh = _tri_fan(pts)
    cam = np.array([7.0, 10.0, 9.0])
    grid_np = np.zeros(tuple(geom.dims), dtype=np.uint8)
    _trace_numpy(mesh.vertices, cam, geom.origin, geom.direction, geom.spacing, 0.4, grid_np)
    via_api = cast_rays(mesh, cam, geom, 0.4)
    backend = accel.active_backend()
    assert np.array_equal(via_api.bits, grid_np.astype(bool)), f"paths disagree (active: {backend})"


def test_cast_is_deterministic(unit_geom, rng):
    pts = rng.uniform(0.5, 6.5, size=(40, 3))
    mesh = _tri_fan(pts)
    a = cast_rays(mesh, (3.5, 3.5, 3.5), unit_geom, 0.5)
    b = cast_rays(mesh, (3.5, 3.5, 3.5), unit_geom, 0.5)
    assert np.array_equal(a.bits, b.bits)


def test_ball_structure_radius_one_is_6_neighborhood():
    ball = ball_structure(1)
    assert ball.sum() == 7  # center + 6 axis neighbors; diagonals exceed radius 1


def test_solidify_empty_stays_empty(unit_geom):
    mask = VoxelMask(unit_geom, np.zeros((8, 8, 8), dtype=bool))
    out = solidify(mask, RayVoxParams(step=0.5))
    assert out.count() == 0


def test_hollow_shell_interior_filled():
    geom = make_geom(dims=(9, 9, 9))
    bits = np.zeros((9, 9, 9), dtype=bool)
    bits[2:7, 2:7, 2:7] = True
    bits[3:6, 3:6, 3:6] = False  # hollow core
    mask = VoxelMask(geom, bits)
    out = solidify(mask, RayVoxParams(step=0.5, dilation_radius=0, closing_radius=0, fill_holes=True))
    assert np.array_equal(out.bits, fill_holes_oracle(bits))
    assert out.bits[4, 4, 4]


def test_closing_bridges_gap_of_two_1d():
    # 1-D domain: dilation joins {2..4} and {4..6}; erosion keeps {3,4,5}
    geom = make_geom(dims=(9, 1, 1))
    bits = np.zeros((9, 1, 1), dtype=bool)
    bits[3, 0, 0] = True
    bits[5, 0, 0] = True
    params = RayVoxParams(step=0.5, dilation_radius=0, closing_radius=1, fill_holes=False)
    out = solidify(VoxelMask(geom, bits), params)
    assert out.bits[:, 0, 0].tolist() == [False, False, False, True, True, True, False, False, False]


def test_scaffold_subset_of_solid(unit_geom, rng):
    pts = rng.uniform(1.0, 6.0, size=(25, 3))
    mesh = _tri_fan(pts)
    scaffold = cast_rays(mesh, (3.5, 3.5, 3.5), unit_geom, 0.5)
    solid = solidify(scaffold, RayVoxParams(step=0.5))  # documented defaults: dilate 1, close 2, fill
    assert not np.any(scaffold.bits & ~solid.bits)


def test_hole_fill_leaves_single_background_component(rng):
    geom = make_geom(dims=(20, 20, 20))
    spec_center = np.array([10.0, 10.0, 10.0])
    theta = rng.uniform(0, np.pi, 60)
    phi = rng.uniform(0, 2 * np.pi, 60)
    r = 6.0
    pts = spec_center + r * np.stack(
        [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=1
    )
    mask = build_recon_mask(_tri_fan(pts), spec_center, geom, RayVoxParams(step=0.5))
    assert background_components(mask.bits) == 1


def test_convex_cavity_coverage():
    geom = make_geom(dims=(24, 24, 24))
    center = np.array([12.0, 12.0, 12.0])
    radius = 7.0
    # vertices on a dense lat-long sphere: spacing well under 1 voxel
    u = np.linspace(0, np.pi, 40)
    v = np.linspace(0, 2 * np.pi, 80, endpoint=False)
    uu, vv = np.meshgrid(u, v)
    pts = center + radius * np.stack(
        [np.sin(uu) * np.cos(vv), np.sin(uu) * np.sin(vv), np.cos(uu)], axis=-1
    ).reshape(-1, 3)
    mask = build_recon_mask(_tri_fan(pts), center, geom, RayVoxParams(step=0.5, dilation_radius=1, closing_radius=2))
    xx, yy, zz = np.mgrid[0:24, 0:24, 0:24]
    interior = (xx - 12.0) ** 2 + (yy - 12.0) ** 2 + (zz - 12.0) ** 2 <= radius**2
    covered = np.count_nonzero(mask.bits & interior) / np.count_nonzero(interior)
    assert covered >= 0.98


def _subdivided_tetra(corners, target_edge):
    """Triangulate tetra faces into vertices spaced <= target_edge."""
    faces = [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
    pts = []
    for fa, fb, fc in faces:
        a, b, c = corners[fa], corners[fb], corners[fc]
        n = int(np.ceil(max(np.linalg.norm(b - a), np.linalg.norm(c - a), np.linalg.norm(c - b)) / target_edge))
        for i in range(n + 1):
            for j in range(n + 1 - i):
                k = n - i - j
                pts.append((i * a + j * b + k * c) / n)
    return _tri_fan(np.array(pts))


def test_tetrahedron_interior_lower_bound():
    geom = make_geom(dims=(26, 26, 26))
    corners = np.array([[4.0, 4.0, 4.0], [21.0, 5.0, 6.0], [6.0, 21.0, 5.0], [7.0, 6.0, 21.0]])
    camera = corners.mean(axis=0)
    mesh = _subdivided_tetra(corners, target_edge=0.9)
    mask = build_recon_mask(mesh, camera, geom, RayVoxParams(step=0.5, dilation_radius=0, closing_radius=1))

    # brute-force point-in-tetrahedron over voxel centers (half-space test)
    inside = np.ones((26, 26, 26), dtype=bool)
    centroid = corners.mean(axis=0)
    xx, yy, zz = np.mgrid[0:26, 0:26, 0:26]
    pts = np.stack([xx, yy, zz], axis=-1).astype(float)
    for face in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a, b, c = corners[list(face)]
        normal = np.cross(b - a, c - a)
        if np.dot(normal, centroid - a) < 0:
            normal = -normal
        inside &= (pts - a) @ normal >= 0
    covered = np.count_nonzero(mask.bits & inside) / np.count_nonzero(inside)
    assert covered >= 0.98


def test_camera_point_from_fiducials():
    fids = FiducialSet((("camera", (1.0, 2.0, 3.0)),), "LPS")
    assert np.array_equal(camera_point(fids), [1, 2, 3])
    two = FiducialSet((("a", (0.0, 0, 0)), ("b", (1.0, 1, 1))), "LPS")
    with pytest.raises(GeometryError, match="exactly one"):
        camera_point(two)


def test_params_validation():
    with pytest.raises(ValueError):
        RayVoxParams(step=-1.0)
    with pytest.raises(ValueError):
        RayVoxParams(step=0.5, dilation_radius=-1)
