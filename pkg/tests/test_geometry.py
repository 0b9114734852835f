import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semistatic import geometry as geo
from semistatic.poses import Pose, wrap_angle

TABLE = geo.ClassTable()
BOX, FENCE, FLOOR, ROBOT = (TABLE.id_of(n) for n in ("box", "fence", "floor", "robot"))


def box_surface(extents, step=0.03, center=(0.0, 0.0, 0.0)):
    """Regular samples on the six faces of an axis-aligned box."""
    ext = np.asarray(extents, dtype=float)
    pts = []
    for axis in range(3):
        o = [a for a in range(3) if a != axis]
        u = np.arange(-ext[o[0]] / 2, ext[o[0]] / 2 + 1e-9, step)
        v = np.arange(-ext[o[1]] / 2, ext[o[1]] / 2 + 1e-9, step)
        uu, vv = np.meshgrid(u, v)
        for sgn in (-1, 1):
            p = np.zeros((uu.size, 3))
            p[:, o[0]], p[:, o[1]], p[:, axis] = uu.ravel(), vv.ravel(), sgn * ext[axis] / 2
            pts.append(p)
    return np.unique(np.round(np.vstack(pts), 9), axis=0) + np.asarray(center)


def blob(center, n=80, spread=0.05, seed=0):
    return np.random.default_rng(seed).normal(center, spread, (n, 3))


def cloud(points, label):
    return geo.LabeledCloud(points, np.full(len(points), label))


def test_stationarity_table():
    assert geo.stationarity_class("robot") == 0
    assert geo.stationarity_class("shelf") == 1
    assert geo.stationarity_class(BOX) == 1
    with pytest.raises(geo.UnknownClass, match="unknown semantic class"):
        geo.stationarity_class(999)


def test_class_table_rejects_duplicates():
    with pytest.raises(ValueError):
        geo.ClassTable((geo.SemanticClass(0, "a", 1, 0.9), geo.SemanticClass(0, "b", 1, 0.9)))


def test_ground_plane_only_is_removed():
    g = np.random.default_rng(0).uniform([-2, -2, 0], [2, 2, 0], (500, 3))
    assert len(geo.remove_ground_and_outliers(cloud(g, FLOOR))) == 0


def test_box_above_ground_survives():
    rng = np.random.default_rng(1)
    ground = cloud(rng.uniform([-3, -3, -0.01], [3, 3, 0.01], (3000, 3)), FLOOR)
    box = cloud(box_surface((1, 1, 1), center=(0, 0, 0.6)), BOX)
    out = geo.remove_ground_and_outliers(geo.LabeledCloud.concat([ground, box]))
    assert len(out) == len(box) and np.all(out.labels == BOX)


def test_ground_found_by_ransac_when_unconfigured():
    rng = np.random.default_rng(2)
    ground = cloud(rng.uniform([-3, -3, 0.49], [3, 3, 0.51], (3000, 3)), FLOOR)
    box = cloud(box_surface((1, 1, 1), center=(0, 0, 1.1)), BOX)
    out = geo.remove_ground_and_outliers(geo.LabeledCloud.concat([ground, box]), geo.GeometryConfig(ground_z=None))
    assert np.all(out.labels == BOX) and len(out) > 0.9 * len(box)


def test_isolated_point_is_outlier():
    pts = np.vstack([blob((0, 0, 1), 300), [[10.0, 0.0, 1.0]]])
    out = geo.statistical_outlier_filter(cloud(pts, BOX))
    assert len(out) == 300 and not np.any(np.all(out.points == [10.0, 0.0, 1.0], axis=1))


def _plane_points(n, z, seed=0):
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(0, 1, n), rng.uniform(0, 1, n), np.full(n, z)])


def test_plane_majority_vote():
    labels = np.full(400, BOX)
    labels[::20] = FLOOR
    out = geo.enforce_plane_semantics(geo.LabeledCloud(_plane_points(400, 1.0), labels))
    assert np.all(out.labels == BOX)


def test_plane_vote_tie_goes_to_lower_id():
    labels = np.where(np.arange(400) % 2 == 0, FENCE, BOX)
    out = geo.enforce_plane_semantics(geo.LabeledCloud(_plane_points(400, 1.0), labels))
    assert np.all(out.labels == min(BOX, FENCE))
    assert geo.modal_label([3, 1, 3, 1]) == 1


def test_parallel_planes_keep_their_labels():
    a = cloud(_plane_points(400, 1.0, 1), BOX)
    b = cloud(_plane_points(400, 2.0, 2), FENCE)
    mixed = geo.LabeledCloud.concat([a, b])
    mixed.labels[[5, 405]] = ROBOT
    out = geo.enforce_plane_semantics(mixed)
    assert np.all(out.labels[:400] == BOX) and np.all(out.labels[400:] == FENCE)


def test_non_planar_points_untouched():
    pts = blob((0, 0, 1), 100, spread=0.3)
    labels = np.arange(100) % 3
    out = geo.enforce_plane_semantics(geo.LabeledCloud(pts, labels))
    np.testing.assert_array_equal(out.labels, labels)


def test_cluster_far_blobs():
    pts = np.vstack([blob((0, 0, 1)), blob((2, 0, 1), seed=1)])
    assert len(geo.euclidean_cluster(cloud(pts, BOX), 0.2, 10)) == 2


def test_cluster_touching_blobs_with_different_labels():
    pts = np.vstack([blob((0, 0, 1)), blob((0.05, 0, 1), seed=1)])
    labels = np.r_[np.full(80, BOX), np.full(80, FENCE)]
    clusters = geo.euclidean_cluster(geo.LabeledCloud(pts, labels), 0.2, 10)
    assert len(clusters) == 2
    assert sorted(len(set(labels[c])) for c in clusters) == [1, 1]


def test_cluster_min_points():
    assert geo.euclidean_cluster(cloud(blob((0, 0, 1), 9), BOX), 0.2, 10) == []
    with pytest.raises(ValueError):
        geo.euclidean_cluster(cloud(blob((0, 0, 1), 9), BOX), 0.0, 1)


@settings(max_examples=40)
@given(st.integers(0, 10**6), st.integers(1, 20))
def test_clusters_partition_survivors(seed, min_points):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 2, (150, 3))
    labels = rng.integers(0, 3, 150)
    clusters = geo.euclidean_cluster(geo.LabeledCloud(pts, labels), 0.3, min_points)
    flat = np.concatenate(clusters) if clusters else np.empty(0, int)
    assert len(flat) == len(set(flat.tolist()))
    for c in clusters:
        assert len(c) >= min_points and len(set(labels[c].tolist())) == 1


def _square(n=21, side=1.0, h=0.5):
    g = np.linspace(-side / 2, side / 2, n)
    x, y = np.meshgrid(g, g)
    return np.column_stack([x.ravel(), y.ravel(), np.where(np.arange(x.size) % 2, 0.0, h)])


def _rot_z(pts, theta):
    c, s = math.cos(theta), math.sin(theta)
    return pts @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]).T


def test_bbox_unit_square():
    b = geo.fit_bbox_pca(_square())
    assert b.heading == pytest.approx(0.0, abs=1e-9)
    np.testing.assert_allclose(b.extents, [1, 1, 0.5], atol=1e-9)


def test_bbox_rotated_square():
    b = geo.fit_bbox_pca(_rot_z(_square(), math.radians(30)))
    # a square's heading is only defined up to quarter turns
    assert abs(wrap_angle(4 * (b.heading - math.radians(30)))) / 4 < 1e-6
    np.testing.assert_allclose(b.extents, [1, 1, 0.5], atol=1e-9)


def test_bbox_rotated_rectangle():
    pts = _square() * [2.0, 0.5, 1.0]
    b = geo.fit_bbox_pca(_rot_z(pts, math.radians(30)))
    assert b.heading == pytest.approx(math.radians(30), abs=1e-6)
    np.testing.assert_allclose(b.extents, [2, 0.5, 0.5], atol=1e-9)


def test_bbox_vertical_line_falls_back():
    pts = np.column_stack([np.full(10, 0.3), np.full(10, -0.2), np.linspace(0, 1, 10)])
    b = geo.fit_bbox_pca(pts)
    assert b.heading == 0.0
    np.testing.assert_allclose(b.center, [0.3, -0.2, 0.5])
    assert np.all(b.extents > 0)


@settings(max_examples=60)
@given(st.integers(0, 10**6), st.floats(-math.pi, math.pi))
def test_bbox_equivariant_and_contains(seed, theta):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, (60, 3)) * [1.5, 0.4, 0.6] + rng.uniform(-3, 3, 3)
    b0 = geo.fit_bbox_pca(pts)
    b1 = geo.fit_bbox_pca(_rot_z(pts, theta))
    assert abs(wrap_angle(2 * (b1.heading - b0.heading - theta))) < 1e-6
    assert -math.pi / 2 < b1.heading <= math.pi / 2
    assert np.all(b0.contains(pts, 1e-6))


def _obs(points, label=BOX):
    return geo.make_observation(cloud(points, label), TABLE)


def test_merge_disjoint_unchanged():
    a, b = _obs(box_surface((1, 1, 1), 0.1, (0, 0, 1))), _obs(box_surface((1, 1, 1), 0.1, (3, 0, 1)))
    out = geo.merge_overlapping([a, b], TABLE)
    assert len(out) == 2 and out[0] is a and out[1] is b


def test_merge_half_overlap():
    a, b = _obs(box_surface((1, 1, 1), 0.1, (0, 0, 1))), _obs(box_surface((1, 1, 1), 0.1, (0.5, 0, 1)))
    out = geo.merge_overlapping([a, b], TABLE)
    assert len(out) == 1 and len(out[0].cloud) == len(a.cloud) + len(b.cloud)
    assert out[0].bbox.extents[0] == pytest.approx(1.5)


def test_merge_chain_and_revote():
    a = _obs(box_surface((1, 1, 1), 0.1, (0, 0, 1)))
    b = _obs(box_surface((1, 1, 1), 0.1, (0.8, 0, 1)), FENCE)
    c = _obs(box_surface((1, 1, 1), 0.1, (1.6, 0, 1)))
    assert not geo.boxes_overlap(a.bbox, c.bbox)
    out = geo.merge_overlapping([a, b, c], TABLE)
    assert len(out) == 1
    assert out[0].semantic_class == BOX and np.all(out[0].cloud.labels == BOX)


def test_observation_fields():
    o = _obs(box_surface((1, 1, 1), 0.1, (0, 0, 1)), ROBOT)
    assert o.stationarity == 0 and o.semantic_class == ROBOT
    np.testing.assert_allclose(o.position, [0, 0, 1], atol=1e-9)


def test_voxel_downsample_majority():
    pts = np.array([[0.01, 0.01, 0.01], [0.02, 0.02, 0.02], [0.03, 0.01, 0.02], [0.5, 0.5, 0.5]])
    out = geo.voxel_downsample(geo.LabeledCloud(pts, [2, 2, 1, 4]), 0.1)
    assert len(out) == 2
    assert sorted(out.labels.tolist()) == [2, 4]


def test_normals_face_viewpoint():
    pts = _plane_points(200, 1.0)
    n = geo.estimate_normals(pts, viewpoint=(0.5, 0.5, 3.0))
    np.testing.assert_allclose(n, np.tile([0, 0, 1.0], (200, 1)), atol=1e-9)


WALL = box_surface((2.4, 0.8, 1.2)) + [0, 0, 0.6]


def test_icp_identity():
    res = geo.icp_point_to_plane(WALL, WALL)
    assert res.converged and res.dissimilarity == 0.0
    np.testing.assert_allclose(res.translation, 0, atol=1e-9)
    assert abs(res.heading) < 1e-9


def test_icp_plane_translation():
    g = np.linspace(0, 1, 30)
    x, y = np.meshgrid(g, g)
    plane = np.column_stack([np.zeros(x.size), x.ravel(), y.ravel()])
    res = geo.icp_point_to_plane(plane - [0.2, 0, 0], plane)
    assert np.linalg.norm(res.translation - [0.2, 0, 0]) < 1e-3


def test_icp_unrelated_clouds():
    far = WALL + [10.0, 0, 0]
    res = geo.icp_point_to_plane(far, WALL)
    assert res.dissimilarity == pytest.approx(1.0)


def test_icp_needs_points():
    with pytest.raises(ValueError):
        geo.icp_point_to_plane(WALL[:5], WALL)


def test_icp_camera_sign():
    cam = Pose.look_at([0, -4, 0.6], [0, 0, 0.6])
    # the source (observation) sits 0.3 m farther from the camera than the target
    res = geo.icp_point_to_plane(WALL + [0, 0.3, 0], WALL, camera_pose=cam, cfg=geo.IcpConfig(search_dist=1.0))
    assert res.p_z_camera == pytest.approx(0.3, abs=1e-3)


@settings(max_examples=25)
@given(st.floats(0, 0.5), st.floats(0, 2 * math.pi), st.floats(-15, 15))
def test_icp_recovers_planar_transform(r, a, phi_deg):
    truth = Pose.from_yaw([r * math.cos(a), r * math.sin(a), 0.0], math.radians(phi_deg))
    perturb = Pose.from_yaw([0.01, -0.01, 0.0], 0.005)
    res = geo.icp_point_to_plane(truth.inverse().apply(WALL), WALL, init=perturb.compose(truth),
                                 cfg=geo.IcpConfig(search_dist=1.0))
    assert np.linalg.norm(res.transform.translation - truth.translation) < 1e-3
    assert abs(wrap_angle(res.transform.yaw - truth.yaw)) < 1e-3


@settings(max_examples=20)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-math.pi, math.pi))
def test_icp_dissimilarity_rigid_invariant(x, y, theta):
    rng = np.random.default_rng(0)
    src = WALL[rng.permutation(len(WALL))[:800]] + [0.05, 0.02, 0.0]
    src[:100] += [0, 0, 2.0]  # a chunk with no counterpart in the target
    base = geo.icp_point_to_plane(src, WALL)
    g = Pose.from_yaw([x, y, 0.0], theta)
    moved = geo.icp_point_to_plane(g.apply(src), g.apply(WALL))
    assert moved.dissimilarity == pytest.approx(base.dissimilarity, abs=2.0 / len(src))
