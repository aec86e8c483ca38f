import numpy as np
import pytest
from hypothesis import given, strategies as st

from pointpose.cloud import PointCloud, apply_transform, estimate_normals
from pointpose.exceptions import InvalidParameter, ParseError
from pointpose.fpfh import (
    FeatureSet,
    FPFHExtractor,
    compute_fpfh,
    compute_spfh,
    describe,
    pair_features,
    read_features,
    write_features,
)
from pointpose.synthetic import random_rigid_transform

from oracles import darboux, naive_fpfh, naive_spfh


def random_oriented_cloud(rng, n, extent=0.1):
    pts = rng.uniform(0, extent, size=(n, 3))
    nrm = rng.normal(size=(n, 3))
    return PointCloud(pts, nrm / np.linalg.norm(nrm, axis=1, keepdims=True))


def test_spfh_without_neighbors_is_zero(rng):
    c = random_oriented_cloud(rng, 5)
    np.testing.assert_array_equal(compute_spfh(c, 0, []), np.zeros(33))
    np.testing.assert_array_equal(compute_spfh(c, 0, [0]), np.zeros(33))


def test_parallel_normals_perpendicular_to_line_hit_center_alpha_bin():
    c = PointCloud([[0, 0, 0], [0.01, 0, 0]], [[0, 0, 1.0], [0, 0, 1.0]])
    alpha, phi, theta = pair_features(c.points[0], c.normals[0], c.points[1], c.normals[1])
    assert alpha[0] == 0.0
    h = compute_spfh(c, 0, [1])
    assert h[5] == 100.0 and h[:11].sum() == 100.0


def test_pair_features_match_transcribed_formulas(rng):
    for _ in range(200):
        ps, pt = rng.normal(size=(2, 3))
        ns, nt = rng.normal(size=(2, 3))
        ns /= np.linalg.norm(ns)
        nt /= np.linalg.norm(nt)
        got = [x[0] for x in pair_features(ps, ns, pt, nt)]
        np.testing.assert_allclose(got, darboux(tuple(ps), tuple(ns), tuple(pt), tuple(nt)), atol=1e-12)


def test_upper_range_edge_lands_in_last_bin():
    # v = (0, 1, 0) equals n_t, so alpha = 1 exactly
    c = PointCloud([[0, 0, 0], [0.01, 0, 0]], [[0, 0, 1.0], [0, 1.0, 0]])
    alpha, _, _ = pair_features(c.points[0], c.normals[0], c.points[1], c.normals[1])
    assert alpha[0] == 1.0
    assert compute_spfh(c, 0, [1])[10] == 100.0


def test_normal_along_line_gives_zero_features():
    c = PointCloud([[0, 0, 0], [1.0, 0, 0]], [[1.0, 0, 0], [0, 1.0, 0]])
    feats = pair_features(c.points[0], c.normals[0], c.points[1], c.normals[1])
    assert all(f[0] == 0.0 for f in feats)


def test_spfh_matches_oracle_on_50_point_neighborhood(rng):
    c = random_oriented_cloud(rng, 51, extent=0.02)
    got = compute_spfh(c, 0, np.arange(1, 51))
    want, nbrs = naive_spfh(c.points, c.normals, 0, radius=1.0)
    assert len(nbrs) == 50
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_fpfh_matches_naive_double_loop(rng):
    c = random_oriented_cloud(rng, 200)
    fs = compute_fpfh(c, None, 0.05)
    want = naive_fpfh(c.points, c.normals, 0.05)
    assert list(fs.keypoint_indices) == sorted(want)
    for i, d in zip(fs.keypoint_indices, fs.descriptors):
        np.testing.assert_allclose(d, want[int(i)], atol=1e-5)


def test_groups_sum_to_100(rng):
    fs = compute_fpfh(random_oriented_cloud(rng, 300), None, 0.04)
    sums = fs.descriptors.reshape(-1, 3, 11).sum(axis=2)
    np.testing.assert_allclose(sums, 100.0, atol=1e-3)
    assert (fs.descriptors >= 0).all()


def test_isolated_keypoints_are_dropped():
    c = PointCloud([[0, 0, 0], [1, 0, 0], [0, 1, 0]], np.tile([0, 0, 1.0], (3, 1)))
    fs = compute_fpfh(c, None, 0.05)
    assert len(fs) == 0 and fs.diagnostics["no_neighbors"] == 3


def test_invalid_normals_are_dropped_and_counted(rng):
    base = random_oriented_cloud(rng, 50)
    flags = np.ones(50, dtype=bool)
    flags[[3, 7]] = False
    c = PointCloud(base.points, base.normals, None, flags)
    fs = compute_fpfh(c, None, 0.1)
    assert 3 not in fs.keypoint_indices and 7 not in fs.keypoint_indices
    assert fs.diagnostics["invalid_normal"] == 2


def test_keypoint_subset_matches_full(rng):
    c = random_oriented_cloud(rng, 150)
    full = compute_fpfh(c, None, 0.05)
    sub = compute_fpfh(c, [10, 3, 99], 0.05)
    lookup = dict(zip(full.keypoint_indices.tolist(), full.descriptors))
    for i, d in zip(sub.keypoint_indices, sub.descriptors):
        np.testing.assert_array_equal(d, lookup[int(i)])


def test_deterministic_bitwise(rng):
    c = random_oriented_cloud(rng, 200)
    assert compute_fpfh(c, None, 0.05).equals(compute_fpfh(c, None, 0.05))


@pytest.mark.parametrize("radius", [0.0, -0.1])
def test_bad_radius(rng, radius):
    with pytest.raises(InvalidParameter):
        compute_fpfh(random_oriented_cloud(rng, 10), None, radius)


@given(st.integers(0, 2 ** 31))
def test_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    c = random_oriented_cloud(np.random.default_rng(7), 120)
    T = random_rigid_transform(rng, np.pi, 1.0)
    a = compute_fpfh(c, None, 0.05)
    b = compute_fpfh(apply_transform(c, T), None, 0.05)
    np.testing.assert_array_equal(a.keypoint_indices, b.keypoint_indices)
    np.testing.assert_allclose(a.descriptors, b.descriptors, atol=1e-4)


def test_extractor_and_describe(rng):
    c = random_oriented_cloud(rng, 200)
    assert FPFHExtractor(radius=0.05).fit_transform(c).equals(compute_fpfh(c, None, 0.05))
    down, fs = describe(PointCloud(rng.uniform(0, 0.1, size=(2000, 3))))
    assert fs.keypoint_indices.max() < len(down)


def test_file_round_trip(tmp_path, rng):
    fs = compute_fpfh(random_oriented_cloud(rng, 100), None, 0.05)
    write_features(tmp_path / "f.fpfh", fs)
    back = read_features(tmp_path / "f.fpfh")
    assert back.equals(fs)
    raw = (tmp_path / "f.fpfh").read_bytes()
    assert raw[:4] == b"FPFH" and len(raw) == 16 + len(fs) * (4 + 33 * 4)


def test_truncated_file(tmp_path, rng):
    fs = compute_fpfh(random_oriented_cloud(rng, 30), None, 0.05)
    write_features(tmp_path / "f.fpfh", fs)
    (tmp_path / "f.fpfh").write_bytes((tmp_path / "f.fpfh").read_bytes()[:-3])
    with pytest.raises(ParseError):
        read_features(tmp_path / "f.fpfh")


def test_feature_set_validation():
    with pytest.raises(InvalidParameter):
        FeatureSet([1, 1], np.zeros((2, 33)))


def test_near_equal_normals_do_not_swap_on_rounding_noise():
    n = np.array([0.3, -0.5, 0.8])
    n /= np.linalg.norm(n)
    ps, pt = np.zeros(3), np.array([0.01, 0.002, -0.003])
    base = [x[0] for x in pair_features(ps, n, pt, n)]
    for eps in (1e-16, -1e-16, 3e-15):
        jittered = [x[0] for x in pair_features(ps, n, pt, n + eps)]
        np.testing.assert_allclose(jittered, base, atol=1e-12)
