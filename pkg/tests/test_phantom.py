import json

import numpy as np
import pytest

from vict import FormatError, GeometryError, PhantomSpec, Shape, fit_rigid, make_interval_gt, make_pct, make_recon, threshold_mask
from vict.phantom import carved_mask, emit, load_spec
from vict.register import LandmarkPairs, RigidTransform, apply_transform

from conftest import random_rotation, small_phantom_spec
from oracles import background_components


def test_no_cavities_gives_uniform_block():
    spec = PhantomSpec(dims=(12, 12, 12), resections=((Shape("sphere", (6, 6, 6), (3, 3, 3)),),))
    pct = make_pct(spec)
    assert np.all(pct.values == spec.tissue_hu)


def test_sphere_cavity_volume_matches_analytic():
    spec = PhantomSpec(dims=(24, 24, 24), cavities=(Shape("sphere", (12, 12, 12), (5, 5, 5)),))
    pct = make_pct(spec)
    count = int(np.sum(pct.values == spec.background_hu))
    analytic = 4.0 / 3.0 * np.pi * 5**3
    assert abs(count - analytic) <= 0.1 * analytic


def test_two_disjoint_cavities_two_components():
    spec = PhantomSpec(
        dims=(30, 30, 30),
        cavities=(Shape("sphere", (9, 15, 15), (4, 4, 4)), Shape("sphere", (21, 15, 15), (4, 4, 4))),
    )
    pct = make_pct(spec)
    air = pct.values == spec.background_hu
    # interior background components, excluding the (absent) outside air
    assert background_components(~air) == 2


def test_shape_outside_grid_rejected():
    with pytest.raises(FormatError, match="extent"):
        PhantomSpec(dims=(10, 10, 10), cavities=(Shape("sphere", (9, 5, 5), (4, 4, 4)),))


def test_resection_must_touch_tissue():
    spec = PhantomSpec(
        dims=(20, 20, 20),
        cavities=(Shape("sphere", (10, 10, 10), (6, 6, 6)),),
        resections=((Shape("sphere", (10, 10, 10), (3, 3, 3)),),),  # entirely inside the cavity
    )
    with pytest.raises(FormatError, match="does not intersect tissue"):
        make_pct(spec)


def test_interval_gt_zero_shapes_equals_pct():
    spec = PhantomSpec(
        dims=(16, 16, 16),
        cavities=(Shape("sphere", (8, 8, 8), (4, 4, 4)),),
        resections=((), (Shape("sphere", (11, 8, 8), (4, 4, 4)),)),
    )
    assert np.array_equal(make_interval_gt(spec, 1).values, make_pct(spec).values)


def test_interval_out_of_range():
    spec = small_phantom_spec()
    with pytest.raises(FormatError):
        make_interval_gt(spec, 0)
    with pytest.raises(FormatError):
        make_interval_gt(spec, 3)


def test_cavity_counts_non_decreasing():
    spec = small_phantom_spec()
    counts = [int(np.sum(make_interval_gt(spec, k).values == spec.background_hu)) for k in (1, 2)]
    base = int(np.sum(make_pct(spec).values == spec.background_hu))
    assert base <= counts[0] <= counts[1]


def test_carved_equals_membership():
    spec = small_phantom_spec()
    for k in (1, 2):
        gt = make_interval_gt(spec, k)
        pct = make_pct(spec)
        carved = carved_mask(spec, k)
        newly_air = (gt.values == spec.background_hu) & (pct.values != spec.background_hu)
        assert np.array_equal(newly_air, carved & (pct.values == spec.tissue_hu))


def test_ground_truth_satisfies_update_identity():
    # the phantom obeys the update rule by construction
    spec = small_phantom_spec()
    tau = -300.0
    pct_mask = threshold_mask(make_pct(spec), tau)
    for k in (1, 2):
        gt_mask = threshold_mask(make_interval_gt(spec, k), tau)
        carved = carved_mask(spec, k)
        assert np.array_equal(gt_mask.bits, pct_mask.bits & ~carved)


def test_mesh_area_ratio_for_sphere():
    spec = PhantomSpec(
        dims=(32, 32, 32),
        cavities=(Shape("sphere", (16, 16, 16), (8, 8, 8)),),
        resections=((Shape("sphere", (16, 16, 16), (9, 9, 9)),),),
    )
    mesh, _, _, _ = make_recon(spec, 1)
    ratio = mesh.surface_area() / (4 * np.pi * 9**2)
    assert 1.0 <= ratio <= 1.6


def test_mesh_vertices_on_face_corners():
    spec = small_phantom_spec()
    mesh, _, _, _ = make_recon(spec, 1)
    # corners live on half-integer grid positions (spacing 1, origin 0)
    doubled = mesh.vertices * 2.0
    assert np.max(np.abs(doubled - np.round(doubled))) < 1e-9
    # and every vertex is a corner of a cavity boundary voxel
    gt = make_interval_gt(spec, 1)
    air = gt.values == spec.background_hu
    for v in mesh.vertices[:50]:
        neighbors = []
        for dx in (-0.5, 0.5):
            for dy in (-0.5, 0.5):
                for dz in (-0.5, 0.5):
                    idx = np.round(v + [dx, dy, dz]).astype(int)
                    if np.all(idx >= 0) and np.all(idx < spec.dims):
                        neighbors.append(bool(air[tuple(idx)]))
        assert any(neighbors) and not all(neighbors)


def test_camera_inside_cavity():
    spec = small_phantom_spec()
    mesh, camera, _, _ = make_recon(spec, 2)
    gt = make_interval_gt(spec, 2)
    pos = camera.points[0][1]
    idx = np.round(pos).astype(int)
    assert gt.values[tuple(idx)] == spec.background_hu
    assert camera.points[0][0] == "camera"


def test_identity_perturb_keeps_frames_equal():
    spec = small_phantom_spec()
    _, _, src, dst = make_recon(spec, 1)
    assert src.labels() == dst.labels()
    assert np.allclose(src.positions(), dst.positions(), atol=0)


def test_registration_recovers_perturb_inverse(rng):
    perturb = RigidTransform(random_rotation(rng), rng.normal(size=3) * 8)
    spec = small_phantom_spec(perturb=perturb)
    mesh, camera, src, dst = make_recon(spec, 1)
    pairs = LandmarkPairs(tuple((l, s, d) for (l, s), (_, d) in zip(src.points, dst.points)))
    t, fre = fit_rigid(pairs)
    assert fre < 1e-9
    inv = perturb.inverse()
    assert np.allclose(t.rotation, inv.rotation, atol=1e-9)
    assert np.allclose(t.translation, inv.translation, atol=1e-9)
    # mapping the perturbed mesh back gives the identity-frame mesh
    spec_id = small_phantom_spec()
    mesh_id, _, _, _ = make_recon(spec_id, 1)
    assert np.allclose(apply_transform(t, mesh).vertices, mesh_id.vertices, atol=1e-9)


def test_disconnected_cavity_rejected():
    spec = PhantomSpec(
        dims=(30, 30, 30),
        cavities=(Shape("sphere", (9, 15, 15), (4, 4, 4)), Shape("sphere", (21, 15, 15), (4, 4, 4))),
        resections=((Shape("sphere", (9, 15, 15), (5, 5, 5)),),),
    )
    with pytest.raises(GeometryError, match="disconnected"):
        make_recon(spec, 1)


def test_determinism_bit_identical():
    spec = small_phantom_spec()
    a_pct, b_pct = make_pct(spec), make_pct(spec)
    assert np.array_equal(a_pct.values, b_pct.values)
    m1, c1, s1, d1 = make_recon(spec, 2)
    m2, c2, s2, d2 = make_recon(spec, 2)
    assert np.array_equal(m1.vertices, m2.vertices)
    assert np.array_equal(m1.triangles, m2.triangles)
    assert np.array_equal(c1.points[0][1], c2.points[0][1])


def test_visible_faces_only_keeps_convex_coverage():
    base = PhantomSpec(
        dims=(26, 26, 26),
        cavities=(Shape("sphere", (13, 13, 13), (6, 6, 6)),),
        resections=((Shape("sphere", (13, 13, 13), (7, 7, 7)),),),
    )
    full, _, _, _ = make_recon(base, 1)
    with_filter = PhantomSpec(
        dims=base.dims, spacing=base.spacing, cavities=base.cavities,
        resections=base.resections, visible_faces_only=True,
    )
    filtered, _, _, _ = make_recon(with_filter, 1)
    # a convex cavity is fully visible from an interior camera
    assert len(filtered.triangles) >= 0.95 * len(full.triangles)


def test_spec_json_round_trip(tmp_path, rng):
    perturb = RigidTransform(random_rotation(rng), rng.normal(size=3) * 5)
    spec = small_phantom_spec(perturb=perturb)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec.to_dict()))
    back = load_spec(path)
    assert back.dims == spec.dims
    assert back.cavities == spec.cavities
    assert back.resections == spec.resections
    assert np.allclose(back.perturb.matrix(), spec.perturb.matrix(), atol=0)


def test_emit_writes_documented_files(tmp_path):
    spec = small_phantom_spec()
    manifest = emit(spec, tmp_path)
    for name in (
        "pct.nrrd", "gt_1.nrrd", "gt_2.nrrd", "recon_1.stl", "recon_2.stl",
        "camera_1.fcsv", "camera_2.fcsv", "landmarks_src.fcsv", "landmarks_dst.fcsv", "manifest.json",
    ):
        assert (tmp_path / name).is_file(), name
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk["pct"] == "pct.nrrd"
    assert on_disk["intervals"] == manifest["intervals"]
    assert len(on_disk["gt"]) == 2
    assert {"step_mm", "dilation_radius", "closing_radius", "fill_holes", "tau_hu", "air_hu", "roi_margin"} <= set(
        on_disk["params"]
    )


def test_emit_is_deterministic(tmp_path):
    spec = small_phantom_spec()
    emit(spec, tmp_path / "a")
    emit(spec, tmp_path / "b")
    for name in ("pct.nrrd", "recon_1.stl", "camera_1.fcsv", "manifest.json", "landmarks_src.fcsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
