import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from chartatlas.geometry import (
    GeometryError,
    PointCloud,
    SpatialIndex,
    bounding_box,
    denormalize,
    estimate_normals,
    normalize,
)


def test_bounding_box_two_points():
    box = bounding_box(PointCloud([[0, 0, 0], [1, 2, 3]]))
    np.testing.assert_array_equal(box.min, [0, 0, 0])
    np.testing.assert_array_equal(box.max, [1, 2, 3])
    assert box.diagonal == pytest.approx(np.sqrt(14))


def test_bounding_box_single_point_is_degenerate():
    box = bounding_box(PointCloud([[1.5, -2, 3]]))
    np.testing.assert_array_equal(box.min, box.max)
    assert box.diagonal == 0


def test_bounding_box_uniform_cube_is_tight():
    pts = np.random.default_rng(0).uniform(size=(1000, 3))
    box = bounding_box(PointCloud(pts))
    assert np.sqrt(3) * 0.9 <= box.diagonal <= np.sqrt(3)
    assert box.contains(pts).all()
    # every face touches a point
    for k in range(3):
        assert np.any(pts[:, k] == box.min[k]) and np.any(pts[:, k] == box.max[k])


def test_empty_cloud_rejected():
    with pytest.raises(GeometryError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(GeometryError):
        bounding_box(np.zeros((0, 3)))


def test_non_unit_normals_rejected():
    with pytest.raises(GeometryError):
        PointCloud([[0, 0, 0]], [[0, 0, 2.0]])


def test_normalize_cube_corners():
    corners = np.array([[x, y, z] for x in (0, 2) for y in (0, 2) for z in (0, 2)], dtype=float)
    out, tf = normalize(PointCloud(corners))
    assert bounding_box(out).diagonal == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(out.points.mean(axis=0), 0, atol=1e-9)
    assert tf.scale == pytest.approx(2 * np.sqrt(3))


def test_normalize_is_idempotent():
    pts = np.random.default_rng(1).normal(size=(50, 3))
    once, _ = normalize(PointCloud(pts))
    _, tf = normalize(once)
    assert tf.scale == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(tf.center, 0, atol=1e-12)


def test_normalize_degenerate():
    with pytest.raises(GeometryError):
        normalize(PointCloud([[1, 1, 1], [1, 1, 1]]))


def test_normalize_keeps_normals():
    rng = np.random.default_rng(2)
    n = rng.normal(size=(10, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    out, _ = normalize(PointCloud(rng.normal(size=(10, 3)), n))
    np.testing.assert_array_equal(out.normals, n)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(2, 40), st.just(3)), elements=st.floats(-1e3, 1e3)),
)
def test_normalize_round_trip(pts):
    cloud = PointCloud(pts)
    if bounding_box(cloud).diagonal <= 1e-6:
        return
    out, tf = normalize(cloud)
    back = denormalize(out, tf)
    scale = max(np.abs(pts).max(), 1.0)
    np.testing.assert_allclose(back.points, pts, rtol=0, atol=1e-9 * scale)
    assert bounding_box(out).diagonal == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(out.points.mean(axis=0), 0, atol=1e-9)


def _brute_ball(pts, c, r):
    return np.flatnonzero(np.linalg.norm(pts - c, axis=1) <= r)


def test_radius_query_zero_radius_hits_duplicates():
    pts = np.array([[0, 0, 0], [1, 1, 1], [0, 0, 0], [0.5, 0, 0]], dtype=float)
    index = SpatialIndex(pts)
    np.testing.assert_array_equal(index.radius_query(pts[0], 0.0), [0, 2])


def test_radius_query_large_radius_returns_all():
    pts = np.random.default_rng(3).uniform(size=(200, 3))
    index = SpatialIndex(pts)
    diag = bounding_box(pts).diagonal
    np.testing.assert_array_equal(index.radius_query(pts[17], diag), np.arange(200))


def test_radius_query_rejects_negative():
    with pytest.raises(GeometryError):
        SpatialIndex(np.zeros((3, 3)) + np.arange(3)[:, None]).radius_query([0, 0, 0], -1.0)


@pytest.mark.parametrize("seed", range(10))
def test_radius_query_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(size=(int(rng.integers(10, 10_000)), 3))
    index = SpatialIndex(pts)
    for _ in range(5):
        c = rng.uniform(-0.2, 1.2, size=3)
        r = rng.uniform(0, 0.5)
        np.testing.assert_array_equal(index.radius_query(c, r), _brute_ball(pts, c, r))


def test_radius_query_boundary_points_included():
    # points exactly at distance 1 along the axes
    pts = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [0.6, 0.8, 0]], dtype=float)
    index = SpatialIndex(pts)
    np.testing.assert_array_equal(index.radius_query([0, 0, 0], 1.0), _brute_ball(pts, np.zeros(3), 1.0))


def test_nearest_matches_brute_force():
    rng = np.random.default_rng(4)
    pts = rng.uniform(size=(3000, 3))
    q = rng.uniform(size=(200, 3))
    d, i = SpatialIndex(pts).nearest(q)
    D = np.linalg.norm(q[:, None] - pts[None], axis=2)
    np.testing.assert_array_equal(i, D.argmin(axis=1))
    np.testing.assert_allclose(d, D.min(axis=1), rtol=0, atol=1e-15)


def test_plane_normals_exact():
    rng = np.random.default_rng(5)
    pts = np.column_stack([rng.uniform(size=(400, 2)), np.zeros(400)])
    out = estimate_normals(PointCloud(pts), k=10)
    ang = np.arccos(np.clip(np.abs(out.normals[:, 2]), -1, 1))
    assert ang.max() < 1e-4
    # sign propagation makes the whole sheet consistent
    assert np.all(out.normals[:, 2] > 0) or np.all(out.normals[:, 2] < 0)


def fibonacci_sphere(n):
    k = np.arange(n) + 0.5
    z = 1 - 2 * k / n
    phi = np.pi * (1 + 5**0.5) * k
    rho = np.sqrt(1 - z * z)
    return np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])


def test_sphere_normals_are_radial():
    pts = fibonacci_sphere(2000)
    out = estimate_normals(PointCloud(pts), k=10)
    cos = np.einsum("ij,ij->i", out.normals, pts)
    assert np.degrees(np.arccos(np.clip(np.abs(cos), 0, 1))).max() < 5.0
    # seeded outward and propagated, so orientation is globally consistent
    assert np.all(cos > 0)


def test_estimate_normals_unit_length():
    pts = np.random.default_rng(7).normal(size=(100, 3))
    out = estimate_normals(PointCloud(pts), k=8)
    np.testing.assert_allclose(np.linalg.norm(out.normals, axis=1), 1.0, atol=1e-12)


def test_estimate_normals_rejects_small_k():
    with pytest.raises(GeometryError):
        estimate_normals(PointCloud(np.random.default_rng(0).normal(size=(10, 3))), k=2)
    with pytest.raises(GeometryError):
        estimate_normals(PointCloud(np.random.default_rng(0).normal(size=(5, 3))), k=8)
