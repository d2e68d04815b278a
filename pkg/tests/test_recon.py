import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sitewave.fixtures import box_mesh, room_planes, synthetic_room_cloud
from sitewave.materials import MaterialClass
from sitewave.recon import (
    FrameVote,
    NonWatertightMeshError,
    PlanePrimitive,
    PointCloud,
    RawPoint,
    ReconConfig,
    ReconError,
    UnlabeledInstanceError,
    build_rt_model,
    filter_outliers,
    fit_plane,
    fuse_cloud,
    fuse_observations,
    huber_weight,
    merge_planes,
    project_to_plane,
    read_point_cloud,
    read_votes,
    vote_material,
    write_point_cloud,
    write_votes,
)
from sitewave.scene import TriMesh
from sitewave.sceneio import save_scene

M = MaterialClass
ROOM_MATS = ["concrete", "concrete", "concrete", "glass", "wood", "concrete"]


def room_votes(n_frames=3, mats=ROOM_MATS):
    return [FrameVote(i, f, M(m)) for i, m in enumerate(mats) for f in range(n_frames)]


# --- Huber weights


@pytest.mark.parametrize("r, w", [(0.5, 1.0), (2.69, 0.5), (-2.69, 0.5), (0.0, 1.0), (1.345, 1.0)])
def test_huber_examples(r, w):
    assert huber_weight(r) == w


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(1e-3, 10.0))
def test_huber_range_and_unit_region(r, k):
    w = huber_weight(r, k)
    assert 0.0 < w <= 1.0
    assert (w == 1.0) == (abs(r) <= k)


def test_huber_continuous_at_threshold():
    k = 1.345
    assert huber_weight(np.nextafter(k, 2.0), k) == pytest.approx(1.0, abs=1e-12)


def test_huber_rejects_nonpositive_threshold():
    with pytest.raises(ValueError):
        huber_weight(1.0, 0.0)


# --- outlier filtering


def grid_cloud(n, origin=(0.0, 0.0, 0.0), spacing=0.02, reproj=None):
    side = math.ceil(n ** (1 / 3))
    idx = np.indices((side, side, side)).reshape(3, -1).T[:n]
    pos = idx * spacing + np.asarray(origin)
    return PointCloud(pos, np.ones(n), reproj_error=np.zeros(n) if reproj is None else reproj)


def test_reprojection_gate_removes_exactly_the_bad_points():
    reproj = np.zeros(1000)
    reproj[::20] = 0.2
    res = filter_outliers(grid_cloud(1000, reproj=reproj), min_cluster=1)
    assert res.removed_reproj == 50 and len(res.cloud) == 950
    assert set(res.kept.tolist()) == set(range(1000)) - set(range(0, 1000, 20))


def test_small_isolated_blob_removed():
    main = grid_cloud(1000)
    blob = grid_cloud(99, origin=(5.0, 0.0, 0.0))
    cloud = PointCloud(np.vstack([main.positions, blob.positions]), np.ones(1099))
    res = filter_outliers(cloud)
    assert len(res.cloud) == 1000 and res.removed_small_clusters == 99


def test_empty_result_is_flagged():
    res = filter_outliers(grid_cloud(50))
    assert res.status == "empty" and res.retention == 0.0


def test_fixture_retention_in_band():
    cloud, _ = synthetic_room_cloud(100_000, bad_reproj_fraction=0.07, blob_fraction=0.05)
    res = filter_outliers(cloud)
    assert 0.85 <= res.retention <= 0.90


def test_filter_order_independent():
    cloud, _ = synthetic_room_cloud(20_000, bad_reproj_fraction=0.05, blob_fraction=0.05, seed=3)
    perm = np.random.default_rng(0).permutation(len(cloud))
    a = filter_outliers(cloud)
    b = filter_outliers(cloud.subset(perm))
    assert set(a.kept.tolist()) == set(perm[b.kept].tolist())


# --- fusion


def test_fusion_examples():
    assert np.allclose(fuse_observations([[0, 0, 0], [2, 0, 0]], [1, 1]), [1, 0, 0])
    assert np.allclose(fuse_observations([[0, 0, 0], [1, 0, 0]], [0.9, 0.1], [1, 1]), [0.1, 0, 0])
    assert np.allclose(fuse_observations([[3, 4, 5]], [0.2]), [3, 4, 5])


def test_fusion_zero_weights_error():
    with pytest.raises(ReconError):
        fuse_observations([[0, 0, 0], [1, 1, 1]], [0.0, 0.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8), st.floats(1e-3, 1e3))
def test_fusion_scale_invariant(w, scale):
    pos = np.random.default_rng(len(w)).normal(size=(len(w), 3))
    a = fuse_observations(pos, w)
    b = fuse_observations(pos, np.asarray(w) * scale)
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_fuse_cloud_groups_voxels():
    pos = np.array([[0.001, 0.001, 0.0], [0.003, 0.001, 0.0], [1.0, 1.0, 1.0]])
    cloud = PointCloud(pos, np.array([0.75, 0.25, 1.0]))
    fused = fuse_cloud(cloud, voxel=0.01)
    assert len(fused) == 2
    assert np.allclose(fused.positions[0], [0.0015, 0.001, 0.0])


def test_fuse_cloud_huber_flag_downweights():
    pos = np.array([[0.001, 0.0, 0.0], [0.009, 0.0, 0.0]])
    cloud = PointCloud(pos, np.ones(2), reproj_error=np.array([0.0, 5.38]))
    plain = fuse_cloud(cloud, 0.01).positions[0, 0]
    robust = fuse_cloud(cloud, 0.01, use_huber=True).positions[0, 0]
    assert plain == pytest.approx(0.005)
    assert robust == pytest.approx((0.001 + 0.25 * 0.009) / 1.25)


def test_from_points_and_label_invariant():
    pts = [RawPoint((0, 0, 0), 0.5, 1.0, 3, 0.01), RawPoint((1, 0, 0), 0.9, 0.5, 4, 0.02)]
    cloud = PointCloud.from_points(pts)
    assert cloud.frame_id.tolist() == [3, 4]
    with pytest.raises(ReconError):
        PointCloud(np.zeros((2, 3)), np.ones(2), instance_id=np.zeros(2))
    with pytest.raises(ReconError):
        PointCloud(np.zeros((1, 3)), np.array([1.5]))


# --- plane fitting and merging


def test_fit_axis_plane():
    p = fit_plane([[0, 0, 2], [1, 0, 2], [0, 1, 2], [1, 1, 2]])
    assert np.allclose(p.normal, [0, 0, 1]) and p.offset == pytest.approx(-2.0)
    assert np.linalg.norm(p.normal) == pytest.approx(1.0, abs=1e-9)


def test_fit_noisy_oblique_plane():
    rng = np.random.default_rng(5)
    n = np.ones(3) / math.sqrt(3)
    uv = rng.uniform(-2, 2, (2000, 2))
    u = np.array([1, -1, 0]) / math.sqrt(2)
    v = np.cross(n, u)
    pts = n / math.sqrt(3) + uv[:, :1] * u + uv[:, 1:] * v + rng.normal(0, 1e-3, (2000, 1)) * n
    p = fit_plane(pts)
    assert math.degrees(math.acos(abs(p.normal @ n))) < 0.1
    assert abs(abs(p.offset) - 1 / math.sqrt(3)) < 1e-3


def test_fit_orientation_toward_viewpoint():
    p = fit_plane([[0, 0, 2], [1, 0, 2], [0, 1, 2]], toward=[0, 0, 0])
    assert np.allclose(p.normal, [0, 0, -1]) and p.offset == pytest.approx(2.0)


@pytest.mark.parametrize("pts", [[[0, 0, 0], [1, 1, 1]], [[0, 0, 0], [1, 1, 1], [2, 2, 2], [3, 3, 3]]])
def test_fit_degenerate_inputs(pts):
    with pytest.raises(ReconError):
        fit_plane(pts)


def prim(normal, offset, area=1.0, ids=(0,)):
    n = np.asarray(normal, float)
    n /= np.linalg.norm(n)
    return PlanePrimitive(n, float(offset), np.asarray(ids), area, -offset * n)


def tilt(deg):
    a = math.radians(deg)
    return [math.sin(a), 0.0, math.cos(a)]


def test_merge_examples():
    assert len(merge_planes([prim([0, 0, 1], -1), prim([0, 0, 1], -1)])) == 1
    assert len(merge_planes([prim([0, 0, 1], 0.0), prim(tilt(5), -0.05)])) == 1
    assert len(merge_planes([prim([0, 0, 1], 0.0), prim([1, 0, 0], 0.0)])) == 2


@pytest.mark.parametrize("dist, merged", [(0.1, True), (0.1 + 1e-6, False), (0.0999999, True)])
def test_merge_distance_boundary(dist, merged):
    out = merge_planes([prim([0, 0, 1], -2.0), prim([0, 0, 1], -2.0 - dist)])
    assert (len(out) == 1) == merged


@pytest.mark.parametrize("angle, merged", [(10.0, True), (10.0 + 1e-6, False), (9.999999, True)])
def test_merge_angle_boundary(angle, merged):
    out = merge_planes([prim([0, 0, 1], 0.0), prim(tilt(angle), 0.0)])
    assert (len(out) == 1) == merged


def test_merge_transitive_and_fixed_point():
    chain = [prim([0, 0, 1], -k * 0.08, ids=(k,)) for k in range(4)]  # neighbours 8 cm apart
    out = merge_planes(chain)
    assert len(out) == 1 and sorted(out[0].inlier_ids.tolist()) == [0, 1, 2, 3]
    again = merge_planes(out)
    assert len(again) == len(out) and np.allclose(again[0].normal, out[0].normal)


def test_merge_refit_uses_area_weights():
    pts = np.array([[x, y, 0.0] for x in range(3) for y in range(3)] + [[x, y, 0.05] for x in range(3) for y in range(3)],
                   dtype=float)
    a = fit_plane(pts[:9], inlier_ids=np.arange(9), area=3.0)
    b = fit_plane(pts[9:], inlier_ids=np.arange(9, 18), area=1.0)
    out = merge_planes([a, b], points=pts)
    assert len(out) == 1
    # weighted centroid height = (3*0 + 1*0.05) / 4
    assert -out[0].offset * np.sign(out[0].normal[2]) == pytest.approx(0.0125)


def test_projection_examples():
    plane = prim([0, 0, 1], -2.0)
    mesh = TriMesh([[0, 0, 2.001], [1, 0, 2.0], [0, 1, 1.999]], [[0, 1, 2]], M.CONCRETE)
    out = project_to_plane(mesh, plane)
    assert np.allclose(out.vertices[0], [0, 0, 2.0], atol=1e-12)
    assert np.array_equal(out.faces, mesh.faces)
    assert np.array_equal(project_to_plane(out, plane).vertices, out.vertices)


def test_wavy_wall_projects_flat():
    xs, zs = np.meshgrid(np.linspace(0, 4, 30), np.linspace(0, 3, 20))
    ys = 1.0 + 0.02 * np.sin(3 * xs) * np.cos(2 * zs)
    v = np.column_stack([xs.ravel(), ys.ravel(), zs.ravel()])
    faces = []
    for i in range(19):
        for j in range(29):
            a = i * 30 + j
            faces += [[a, a + 1, a + 31], [a, a + 31, a + 30]]
    mesh = TriMesh(v, faces, M.WOOD, sheet=True)
    plane = fit_plane(v)
    out = project_to_plane(mesh, plane)
    assert np.abs(out.vertices @ plane.normal + plane.offset).max() <= 1e-9


# --- voting


def votes_of(*mats):
    return [FrameVote(1, f, M(m)) for f, m in enumerate(mats)]


def test_vote_examples():
    assert vote_material(votes_of("wood", "wood", "metal"), 1).material is M.WOOD
    assert vote_material(votes_of("wood"), 1).material is M.WOOD
    tie = vote_material(votes_of("wood", "metal"), 1)
    assert tie.material is M.METAL and tie.tied


def test_vote_without_votes():
    with pytest.raises(UnlabeledInstanceError):
        vote_material(votes_of("wood"), 2)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(list(M)), min_size=1, max_size=15), st.integers(2, 4))
def test_vote_invariant_under_duplication(mats, times):
    votes = [FrameVote(0, f, m) for f, m in enumerate(mats)]
    dup = [FrameVote(0, f, m) for f, m in enumerate(mats * times)]
    assert vote_material(votes, 0).material == vote_material(dup, 0).material


# --- pipeline


@pytest.fixture(scope="module")
def room():
    cloud, names = synthetic_room_cloud(60_000, bad_reproj_fraction=0.05, blob_fraction=0.03, seed=21)
    return cloud, names, build_rt_model(cloud, room_votes())


def test_build_box_room(room):
    cloud, names, res = room
    assert len(res.scene.meshes) == 6
    truth = room_planes()
    for inst, name in enumerate(names):
        mesh = next(m for m in res.scene.meshes if m.object_id.startswith(f"inst{inst}_"))
        assert set(mesh.face_material) == {M(ROOM_MATS[inst])}
        plane = res.planes[inst][0]
        n_true, d_true = truth[name]
        assert math.degrees(math.acos(min(1.0, plane.normal @ n_true))) < 0.5
        assert abs(plane.offset - d_true) < 0.01
    rep = res.report
    assert rep["points_in"] == len(cloud) and not rep["ties"]
    assert all(v["merged"] == 1 for v in rep["instances"].values())


def test_build_is_deterministic(room, tmp_path):
    cloud, _, res = room
    again = build_rt_model(cloud, room_votes())
    save_scene(res.scene, tmp_path / "a" / "s.xml")
    save_scene(again.scene, tmp_path / "b" / "s.xml")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_build_reports_ties(room):
    cloud, _, _ = room
    votes = [v for v in room_votes(2) if v.object_id != 4] + [FrameVote(4, 0, M.WOOD), FrameVote(4, 1, M.GLASS)]
    res = build_rt_model(cloud, votes)
    assert res.report["ties"] == [{"instance": 4, "counts": {"glass": 1, "wood": 1}, "chosen": "glass"}]


def test_build_unlabeled_instance(room):
    cloud, _, _ = room
    votes = [v for v in room_votes() if v.object_id != 3]
    with pytest.raises(UnlabeledInstanceError, match="3"):
        build_rt_model(cloud, votes)


def _with_object(cloud, label):
    rng = np.random.default_rng(0)
    pts = rng.uniform([2.5, 1.5, 0.5], [3.0, 2.0, 1.0], (500, 3))
    return PointCloud(
        np.vstack([cloud.positions, pts]), np.concatenate([cloud.confidence, np.ones(500)]),
        semantic_label=np.concatenate([cloud.semantic_label, [label] * 500]),
        instance_id=np.concatenate([cloud.instance_id, np.full(500, 6)]),
    )


def test_build_nonplanar_needs_watertight_mesh(room):
    cloud, _, _ = room
    cloud = _with_object(cloud, "cabinet")
    votes = room_votes() + [FrameVote(6, 0, M.METAL)]
    cab = box_mesh((2.5, 1.5, 0.5), (3.0, 2.0, 1.0), M.CONCRETE, object_id="cab")
    res = build_rt_model(cloud, votes, {"inst6": cab})
    passed = next(m for m in res.scene.meshes if m.object_id == "inst6_cabinet")
    assert set(passed.face_material) == {M.METAL}
    open_cab = TriMesh(cab.vertices, cab.faces[2:], M.CONCRETE, object_id="cab")
    with pytest.raises(NonWatertightMeshError) as err:
        build_rt_model(cloud, votes, {"inst6": open_cab})
    assert err.value.report.boundary_edge_count > 0
    with pytest.raises(ReconError, match="no supplied mesh"):
        build_rt_model(cloud, votes, {})


def test_config_from_mapping():
    cfg = ReconConfig.from_mapping({"alpha": 0.3, "planar_classes": ["wall"]})
    assert cfg.alpha == 0.3 and cfg.planar_classes == frozenset({"wall"})


# --- file interfaces


def test_point_cloud_round_trip(tmp_path):
    cloud, _ = synthetic_room_cloud(2000, blob_fraction=0.1, seed=2)
    write_point_cloud(cloud, tmp_path / "c.ply")
    back = read_point_cloud(tmp_path / "c.ply")
    assert np.array_equal(back.positions, cloud.positions)
    assert np.array_equal(back.reproj_error, cloud.reproj_error)
    assert back.semantic_label.tolist() == cloud.semantic_label.tolist()
    assert np.array_equal(back.instance_id, cloud.instance_id)


def test_votes_round_trip_and_duplicates(tmp_path):
    votes = room_votes(2)
    write_votes(votes, tmp_path / "v.csv")
    assert read_votes(tmp_path / "v.csv") == votes
    (tmp_path / "d.csv").write_text("object_id,frame_id,material\n1,1,wood\n1,1,metal\n")
    with pytest.raises(ReconError, match="duplicate"):
        read_votes(tmp_path / "d.csv")
