import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from pointpose.cloud import (
    Aabb,
    NormalEstimator,
    PointCloud,
    RigidTransform,
    SpatialIndex,
    VoxelDownsampler,
    apply_transform,
    bounding_box,
    estimate_normals,
    nearest_neighbor,
    radius_search,
    voxel_downsample,
    voxel_keys,
)
from pointpose.exceptions import (
    DimensionMismatch,
    EmptyCloud,
    EmptyIndex,
    InvalidParameter,
    TooFewPoints,
)
from pointpose.synthetic import random_rigid_transform

from oracles import brute_nearest, brute_radius, pca_normal

coords = st.floats(-1.0, 1.0, allow_nan=False, width=64)
clouds = st.integers(1, 60).flatmap(lambda n: arrays(np.float64, (n, 3), elements=coords))


def rot_z(deg):
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])


# --- PointCloud / RigidTransform / Aabb invariants -------------------------

def test_cloud_rejects_length_mismatch():
    with pytest.raises(DimensionMismatch):
        PointCloud(np.zeros((3, 3)), normals=np.tile([0, 0, 1.0], (2, 1)))


def test_cloud_rejects_non_unit_normals():
    with pytest.raises(InvalidParameter):
        PointCloud(np.zeros((2, 3)), normals=np.tile([0, 0, 2.0], (2, 1)))


def test_cloud_rejects_nan():
    with pytest.raises(InvalidParameter):
        PointCloud([[0.0, np.nan, 0.0]])


def test_cloud_arrays_are_read_only():
    c = PointCloud(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        c.points[0, 0] = 1.0


def test_rigid_transform_rejects_reflection():
    with pytest.raises(InvalidParameter):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_rigid_transform_compose_and_inverse(rng):
    a = random_rigid_transform(rng)
    b = random_rigid_transform(rng)
    p = rng.normal(size=(5, 3))
    np.testing.assert_allclose((a @ b).apply(p), a.apply(b.apply(p)), atol=1e-12)
    np.testing.assert_allclose((a @ a.inverse()).matrix, np.eye(4), atol=1e-12)


def test_rigid_transform_dict_round_trip(rng):
    T = random_rigid_transform(rng)
    U = RigidTransform.from_dict(T.to_dict())
    np.testing.assert_array_equal(T.matrix, U.matrix)


def test_aabb_rejects_inverted():
    with pytest.raises(InvalidParameter):
        Aabb([1, 0, 0], [0, 1, 1])


# --- voxel_downsample ------------------------------------------------------

def test_voxel_empty_cloud():
    assert len(voxel_downsample(PointCloud(np.zeros((0, 3))), 0.01)) == 0


def test_voxel_single_point_unchanged():
    out = voxel_downsample(PointCloud([[0.005, 0.005, 0.005]]), 0.01)
    np.testing.assert_array_equal(out.points, [[0.005, 0.005, 0.005]])


def test_voxel_cube_corners_collapse_to_center():
    corners = np.array([[x, y, z] for x in (-0.005, 0.005) for y in (-0.005, 0.005)
                        for z in (-0.005, 0.005)])
    out = voxel_downsample(PointCloud(corners), 0.05)
    assert len(out) == 1
    np.testing.assert_allclose(out.points[0], 0.0, atol=1e-15)


@pytest.mark.parametrize("leaf", [0.0, -1.0, np.inf, np.nan])
def test_voxel_bad_leaf(leaf):
    with pytest.raises(InvalidParameter):
        voxel_downsample(PointCloud(np.zeros((1, 3))), leaf)


def test_voxel_averages_colors_and_normals():
    pts = [[0.001, 0, 0], [0.002, 0, 0]]
    normals = [[1.0, 0, 0], [0, 1.0, 0]]
    colors = [[0.2, 0.4, 0.6], [0.4, 0.6, 0.8]]
    out = voxel_downsample(PointCloud(pts, normals, colors), 0.1)
    np.testing.assert_allclose(out.points[0], [0.0015, 0, 0])
    np.testing.assert_allclose(out.normals[0], np.array([1, 1, 0]) / np.sqrt(2))
    np.testing.assert_allclose(out.colors[0], [0.3, 0.5, 0.7])


def test_voxel_transformer_matches_function(rng):
    c = PointCloud(rng.uniform(size=(300, 3)))
    est = VoxelDownsampler(leaf=0.1)
    assert est.get_params() == {"leaf": 0.1}
    assert est.fit_transform(c).equals(voxel_downsample(c, 0.1))


@given(clouds, st.sampled_from([0.05, 0.1, 0.3]))
def test_voxel_one_point_per_occupied_voxel(points, leaf):
    out = voxel_downsample(PointCloud(points), leaf)
    occupied = {tuple(k) for k in voxel_keys(points, leaf)}
    assert len(out) == len(occupied) <= len(points)
    # each centroid sits in its own voxel's neighborhood
    assert {tuple(k) for k in voxel_keys(out.points, leaf)} <= occupied


@given(clouds, st.sampled_from([0.05, 0.1, 0.3]))
def test_voxel_idempotent_occupancy(points, leaf):
    once = voxel_downsample(PointCloud(points), leaf)
    twice = voxel_downsample(once, leaf)
    assert {tuple(k) for k in voxel_keys(once.points, leaf)} == {
        tuple(k) for k in voxel_keys(twice.points, leaf)}


# --- estimate_normals ------------------------------------------------------

def _plane(rng, n=100):
    xy = rng.uniform(-0.05, 0.05, size=(n, 2))
    return PointCloud(np.column_stack([xy, np.zeros(n)]))


@pytest.mark.parametrize("vp, expected", [((0, 0, 1), (0, 0, 1)), ((0, 0, -1), (0, 0, -1))])
def test_plane_normals_follow_viewpoint(rng, vp, expected):
    out = estimate_normals(_plane(rng), 0.03, vp)
    valid = out.valid_normal_mask()
    assert valid.sum() > 90
    np.testing.assert_allclose(out.normals[valid], np.tile(expected, (valid.sum(), 1)), atol=1e-6)


def test_normals_match_pca_oracle(rng):
    pts = rng.uniform(-0.05, 0.05, size=(200, 3))
    vp = np.array([0.3, -0.2, 1.0])
    out = estimate_normals(PointCloud(pts), 0.03, vp)
    checked = 0
    for i in range(len(pts)):
        nbr = [j for j, d in brute_radius(pts, pts[i], 0.03)]
        if len(nbr) < 3 or not out.valid_normal_mask()[i]:
            continue
        ref = pca_normal(pts[nbr], vp, pts[i])
        np.testing.assert_allclose(out.normals[i], ref, atol=1e-6)
        checked += 1
    assert checked > 100


def test_sparse_points_flagged_invalid():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.001, 0, 0], [0, 0.001, 0], [0.001, 0.001, 0]])
    out = estimate_normals(PointCloud(pts, None), 0.01)
    np.testing.assert_array_equal(out.valid_normal_mask(), [True, False, False, True, True, True])
    np.testing.assert_allclose(np.linalg.norm(out.normals, axis=1), 1.0)


def test_collinear_neighborhood_flagged_invalid():
    pts = np.column_stack([np.linspace(0, 0.01, 10), np.zeros(10), np.zeros(10)])
    out = estimate_normals(PointCloud(pts), 0.05)
    assert not out.valid_normal_mask().any()


def test_too_few_points():
    with pytest.raises(TooFewPoints):
        estimate_normals(PointCloud(np.zeros((2, 3))), 0.1)


def test_centroid_viewpoint_moves_with_cloud(rng):
    pts = rng.normal(size=(300, 3)) * [0.05, 0.03, 0.02]
    c = PointCloud(pts)
    T = random_rigid_transform(rng)
    a = apply_transform(estimate_normals(c, 0.03, "centroid"), T)
    b = estimate_normals(apply_transform(c, T), 0.03, "centroid")
    np.testing.assert_allclose(a.normals, b.normals, atol=1e-9)


def test_normal_estimator_default_radius():
    est = NormalEstimator(leaf=0.01).fit()
    assert est.radius_ == pytest.approx(0.03)


# --- spatial search --------------------------------------------------------

def test_radius_search_contains_query_point(rng):
    pts = rng.uniform(size=(50, 3))
    idx = SpatialIndex(pts)
    hits = radius_search(idx, pts[7], 1e-3)
    assert (7, 0.0) in hits


def test_radius_search_empty_when_radius_tiny(rng):
    pts = rng.uniform(size=(50, 3))
    assert radius_search(SpatialIndex(pts), [5.0, 5.0, 5.0], 1e-3) == []


def test_nearest_tie_goes_to_lower_index():
    idx = SpatialIndex([[1.0, 0, 0], [-1.0, 0, 0]])
    assert nearest_neighbor(idx, [0, 0, 0]) == (0, 1.0)
    idx = SpatialIndex([[-1.0, 0, 0], [1.0, 0, 0], [1.0, 0, 0]])
    assert nearest_neighbor(idx, [0.5, 0, 0])[0] == 1


def test_nearest_on_empty_index():
    with pytest.raises(EmptyIndex):
        nearest_neighbor(SpatialIndex(np.zeros((0, 3))), [0, 0, 0])


def test_high_dimensional_nearest_matches_scan(rng):
    pts = rng.normal(size=(1000, 33))
    idx = SpatialIndex(pts)
    for q in rng.normal(size=(100, 33)):
        i, d = nearest_neighbor(idx, q)
        j, e = brute_nearest(pts, q)
        assert i == j and d == pytest.approx(e, rel=1e-12)


@given(clouds, arrays(np.float64, (3,), elements=coords), st.floats(0.01, 1.5))
def test_radius_search_equals_scan(points, q, r):
    got = radius_search(SpatialIndex(points), q, r)
    want = brute_radius(points, q, r)
    assert [i for i, _ in got] == [i for i, _ in want]
    np.testing.assert_allclose([d for _, d in got], [d for _, d in want], rtol=0, atol=1e-12)


@given(clouds, arrays(np.float64, (3,), elements=coords))
def test_nearest_equals_scan(points, q):
    i, d = nearest_neighbor(SpatialIndex(points), q)
    j, e = brute_nearest(points, q)
    assert i == j and abs(d - e) <= 1e-12


@given(st.integers(1, 30).flatmap(
    lambda n: arrays(np.float64, (n, 3), elements=st.sampled_from([0.0, 0.5, 1.0]))))
def test_nearest_ties_on_lattice(points):
    q = np.array([0.25, 0.5, 0.75])
    assert nearest_neighbor(SpatialIndex(points), q)[0] == brute_nearest(points, q)[0]


def test_radius_search_many_matches_single(rng):
    pts = rng.uniform(size=(200, 3))
    idx = SpatialIndex(pts)
    offsets, nbr, dist = idx.radius_search_many(pts[:20], 0.2)
    for i in range(20):
        single = idx.radius_search(pts[i], 0.2)
        assert list(nbr[offsets[i]:offsets[i + 1]]) == [j for j, _ in single]


# --- apply_transform / bounding_box ----------------------------------------

def test_identity_is_bitwise(rng):
    c = estimate_normals(PointCloud(rng.uniform(size=(50, 3))), 0.5)
    out = apply_transform(c, RigidTransform.identity())
    assert out.equals(c)


def test_transform_then_inverse(rng):
    c = PointCloud(rng.uniform(size=(50, 3)))
    T = random_rigid_transform(rng)
    back = apply_transform(apply_transform(c, T), T.inverse())
    np.testing.assert_allclose(back.points, c.points, atol=1e-12)


def test_quarter_turn_about_z():
    T = RigidTransform(rot_z(90), np.zeros(3))
    out = apply_transform(PointCloud([[1.0, 0, 0]], [[1.0, 0, 0]]), T)
    np.testing.assert_allclose(out.points, [[0, 1, 0]], atol=1e-15)
    np.testing.assert_allclose(out.normals, [[0, 1, 0]], atol=1e-15)


@given(clouds, st.integers(0, 2 ** 31))
def test_transform_preserves_distances(points, seed):
    T = random_rigid_transform(np.random.default_rng(seed))
    out = apply_transform(PointCloud(points), T).points
    d0 = np.linalg.norm(points[:, None] - points[None], axis=-1)
    d1 = np.linalg.norm(out[:, None] - out[None], axis=-1)
    np.testing.assert_allclose(d1, d0, atol=1e-9)


def test_bounding_box_cases():
    box = bounding_box(PointCloud([[1.0, 2, 3]]))
    np.testing.assert_array_equal(box.min, [1, 2, 3])
    np.testing.assert_array_equal(box.max, [1, 2, 3])
    corners = [[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)]
    box = bounding_box(PointCloud(corners))
    np.testing.assert_array_equal(box.min, [0, 0, 0])
    np.testing.assert_array_equal(box.max, [1, 1, 1])
    with pytest.raises(EmptyCloud):
        bounding_box(PointCloud(np.zeros((0, 3))))


@given(clouds, st.integers(0, 2 ** 31))
def test_box_of_transformed_cloud_contains_points(points, seed):
    T = random_rigid_transform(np.random.default_rng(seed))
    moved = apply_transform(PointCloud(points), T)
    box = bounding_box(moved)
    assert box.contains(moved.points).all()
    np.testing.assert_array_equal(box.min, moved.points.min(axis=0))
    np.testing.assert_array_equal(box.max, moved.points.max(axis=0))
