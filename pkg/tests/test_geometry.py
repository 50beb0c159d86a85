import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sketchret.errors import DegenerateGeometryError, PointCloudParseError
from sketchret.geometry import (
    PointCloud,
    chamfer_distance,
    f_score,
    farthest_point_subsample,
    nearest_neighbor_distances,
    nearest_neighbors,
    normalize_unit_box,
    read_cloud,
    resample_uniform,
    write_cloud,
)


def brute_nn(a, b):
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    idx = d2.argmin(axis=1)
    return idx, d2[np.arange(len(a)), idx]


def brute_chamfer(a, b):
    return float(brute_nn(a, b)[1].mean() + brute_nn(b, a)[1].mean())


def brute_f(a, b, tau):
    da = np.sqrt(brute_nn(a, b)[1])
    db = np.sqrt(brute_nn(b, a)[1])
    p = 100.0 * np.count_nonzero(da <= tau) / len(a)
    r = 100.0 * np.count_nonzero(db <= tau) / len(b)
    return 0.0 if p + r == 0 else 2.0 * (p * r) / (p + r)


clouds = arrays(
    np.float64,
    st.tuples(st.integers(1, 40), st.just(3)),
    elements=st.floats(-1, 1, allow_nan=False, width=32),
)


def test_cloud_rejects_bad_input():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        PointCloud([[0.0, np.nan, 0.0]])
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), kind="mesh")


def test_cloud_is_read_only():
    c = PointCloud(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        c.points[0, 0] = 1.0


def test_normalize_cube_corners():
    corners = np.array([[x, y, z] for x in (0, 2) for y in (0, 2) for z in (0, 2)], dtype=float)
    out = normalize_unit_box(PointCloud(corners)).points
    np.testing.assert_array_equal(out, corners / 2 - 0.5)


def test_normalize_two_points_extents():
    out = normalize_unit_box(PointCloud([[0, 0, 0], [4, 1, 0]])).points
    np.testing.assert_allclose(out.max(axis=0) - out.min(axis=0), [1.0, 0.25, 0.0])


def test_normalize_degenerate():
    with pytest.raises(DegenerateGeometryError):
        normalize_unit_box(PointCloud(np.ones((5, 3))))


@settings(max_examples=50, deadline=None)
@given(clouds)
def test_normalize_idempotent(pts):
    c = PointCloud(pts)
    if np.ptp(pts, axis=0).max() == 0:
        return
    once = normalize_unit_box(c)
    twice = normalize_unit_box(once)
    np.testing.assert_allclose(twice.points, once.points, atol=1e-12)
    ext = once.points.max(axis=0) - once.points.min(axis=0)
    assert abs(ext.max() - 1.0) < 1e-12
    assert np.all(np.abs(once.points) <= 0.5 + 1e-12)


def test_resample_membership_and_determinism():
    src = PointCloud(np.random.default_rng(0).uniform(size=(2048, 3)))
    out = resample_uniform(src, 1024, seed=7)
    assert out.size == 1024
    rows = {tuple(p) for p in src.points.tolist()}
    assert all(tuple(p) in rows for p in out.points.tolist())
    assert out.equals(resample_uniform(src, 1024, seed=7))


def test_resample_passthrough_and_zero():
    src = PointCloud(np.random.default_rng(1).uniform(size=(1024, 3)))
    assert resample_uniform(src, 1024, seed=3, passthrough=True).equals(src)
    with pytest.raises(ValueError):
        resample_uniform(src, 0, seed=0)


def test_chamfer_examples():
    a = [[0, 0, 0], [1, 0, 0]]
    assert chamfer_distance(a, a) == 0.0
    assert chamfer_distance([[0, 0, 0]], [[1, 0, 0]]) == 2.0
    assert chamfer_distance([[0, 0, 0], [2, 0, 0]], [[1, 0, 0]]) == 2.0


def test_chamfer_empty_rejected():
    with pytest.raises(ValueError):
        chamfer_distance(np.zeros((0, 3)), [[0, 0, 0]])


def test_f_score_examples():
    a = np.random.default_rng(2).uniform(size=(20, 3))
    assert f_score(a, a, 0.01) == 100.0
    assert f_score([[0, 0, 0]], [[0.02, 0, 0]], 0.01) == 0.0
    val = f_score([[0, 0, 0], [0.005, 0, 0]], [[0, 0, 0], [1, 0, 0]], 0.01)
    assert val == pytest.approx(200.0 / 3.0)


def test_nn_distance_examples():
    np.testing.assert_array_equal(nearest_neighbor_distances([[0, 0, 0]], [[3, 4, 0]]), [5.0])
    b = np.random.default_rng(3).uniform(size=(10, 3))
    assert np.all(nearest_neighbor_distances(b[:4], b) == 0.0)


def test_nn_ties_go_to_lowest_index():
    b = np.array([[1.0, 0, 0], [-1.0, 0, 0], [1.0, 0, 0]])
    idx, sq = nearest_neighbors([[0.0, 0, 0], [2.0, 0, 0]], b)
    assert idx.tolist() == [0, 0]
    assert sq.tolist() == [1.0, 1.0]


@settings(max_examples=100, deadline=None)
@given(clouds, clouds)
def test_metrics_match_brute_force(a, b):
    assert np.array_equal(nearest_neighbor_distances(a, b), np.sqrt(brute_nn(a, b)[1]))
    assert chamfer_distance(a, b) == brute_chamfer(a, b)
    assert f_score(a, b, 0.1) == brute_f(a, b, 0.1)


@settings(max_examples=50, deadline=None)
@given(clouds, clouds)
def test_chamfer_symmetric_and_self_zero(a, b):
    assert chamfer_distance(a, b) == chamfer_distance(b, a)
    assert chamfer_distance(a, a) == 0.0
    assert f_score(a, b) == f_score(b, a)


@settings(max_examples=50, deadline=None)
@given(clouds, clouds, st.floats(0.001, 0.5), st.floats(0.001, 0.5))
def test_f_score_monotone_in_tau(a, b, t1, t2):
    lo, hi = sorted((t1, t2))
    assert f_score(a, b, lo) <= f_score(a, b, hi)


def test_farthest_point_subsample():
    pts = np.random.default_rng(4).uniform(size=(100, 3))
    sub = farthest_point_subsample(pts, 10, seed=1)
    assert sub.shape == (10, 3)
    np.testing.assert_array_equal(sub, farthest_point_subsample(pts, 10, seed=1))
    # translation equivariance
    np.testing.assert_allclose(farthest_point_subsample(pts + 0.25, 10, seed=1), sub + 0.25)
    assert farthest_point_subsample(pts, 0) is pts


def test_cloud_file_roundtrip(tmp_path):
    c = PointCloud(np.random.default_rng(5).normal(size=(17, 3)), kind="sketch")
    path = tmp_path / "c.txt"
    write_cloud(c, path)
    back = read_cloud(path)
    assert back.equals(c)


def test_cloud_file_without_header(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("0 0 0\n1 2 3\n")
    c = read_cloud(path)
    assert c.size == 2 and c.kind == "shape"


@pytest.mark.parametrize(
    "text, line",
    [
        ("0 0 0\n1 2\n", 2),
        ("0 0 0\n1 x 3\n", 2),
        ("# n=3 kind=shape\n0 0 0\n", 1),
        ("0 0 0\n0 0 inf\n", 2),
    ],
)
def test_cloud_parse_errors_report_line(tmp_path, text, line):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    with pytest.raises(PointCloudParseError) as info:
        read_cloud(path)
    assert info.value.line_no == line


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 30), st.just(3)), elements=st.integers(-2, 2).map(float)),
    arrays(np.float64, st.tuples(st.integers(1, 30), st.just(3)), elements=st.integers(-2, 2).map(float)),
)
def test_nn_index_matches_brute_force_on_lattice_ties(a, b):
    idx, sq = nearest_neighbors(a, b)
    bidx, bsq = brute_nn(a, b)
    assert idx.tolist() == bidx.tolist()
    assert np.array_equal(sq, bsq)
