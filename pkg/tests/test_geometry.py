import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reachavoid.geometry import (
    Ball,
    Complement,
    GeometryError,
    HalfspacePolytope,
    HyperRect,
    Intersection,
    Union,
    contains_points,
    pontryagin_erode_ball,
    pontryagin_erode_rect,
    rect_disjoint,
    rect_fully_inside,
    region_contains,
    region_from_dict,
    region_to_dict,
)

coord = st.floats(-3, 3, allow_nan=False)
width = st.floats(0.01, 1.0)


def _cell_and_margin_points(cell, margin, rng, n=400):
    X = cell.center + rng.uniform(-1, 1, (n, cell.dim)) * cell.half_widths
    d = rng.standard_normal((n, cell.dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    corners = cell.center + np.sign(rng.standard_normal((n, cell.dim))) * cell.half_widths
    return np.vstack([X, corners + margin * d])


def test_box_polytope_membership():
    p = HalfspacePolytope.from_box([-1, -2], [1, 2])
    assert p.contains([1, 2])
    assert not p.contains([1.01, 0])
    assert p.contains_points([[0, 0], [3, 0]]).tolist() == [True, False]


def test_polytope_rejects_bad_data():
    with pytest.raises(GeometryError):
        HalfspacePolytope(np.zeros((1, 2)), [1.0])
    with pytest.raises(GeometryError):
        HalfspacePolytope(np.eye(2), [1.0])
    with pytest.raises(GeometryError):
        HalfspacePolytope(np.eye(2), [np.inf, 1.0])


def test_erode_ball_shrinks_by_row_norm():
    p = HalfspacePolytope(np.array([[3.0, 4.0]]), [10.0])
    e = pontryagin_erode_ball(p, 0.5)
    assert e.offsets[0] == pytest.approx(10.0 - 5.0 * 0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 0.5), st.integers(0, 1000))
def test_eroded_polytope_plus_ball_stays_inside(r, seed):
    rng = np.random.default_rng(seed)
    H = rng.standard_normal((6, 2))
    p = HalfspacePolytope(H, np.abs(rng.standard_normal(6)) + 1.0)
    e = pontryagin_erode_ball(p, r)
    X = rng.uniform(-3, 3, (2000, 2))
    inside = X[e.contains_points(X)]
    d = rng.standard_normal(inside.shape)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    assert p.contains_points(inside + r * d).all()


def test_erode_rect_support():
    p = HalfspacePolytope(np.array([[1.0, -2.0]]), [3.0])
    e = pontryagin_erode_rect(p, HyperRect([0, 0], [0.5, 0.25]))
    assert e.offsets[0] == pytest.approx(3.0 - 0.5 - 0.5)


@settings(max_examples=60, deadline=None)
@given(coord, coord, width, width, st.floats(0.0, 0.3), st.integers(0, 10**6))
def test_rect_fully_inside_matches_sampling_ball(cx, cy, hx, hy, margin, seed):
    cell = HyperRect([cx, cy], [hx, hy])
    ball = Ball([0.3, -0.2], 2.5)
    rng = np.random.default_rng(seed)
    X = _cell_and_margin_points(cell, margin, rng)
    if rect_fully_inside(cell, ball, margin):
        assert contains_points(ball, X).all()


@settings(max_examples=60, deadline=None)
@given(coord, coord, width, width, st.floats(0.0, 0.3), st.integers(0, 10**6))
def test_rect_disjoint_is_sound(cx, cy, hx, hy, margin, seed):
    cell = HyperRect([cx, cy], [hx, hy])
    rng = np.random.default_rng(seed)
    obstacles = Union((HyperRect([1, 1], [0.5, 0.3]), Ball([-1, 0.5], 0.7),
                       HalfspacePolytope(np.array([[1.0, 1.0], [-1, 0], [0, -1]]), [-1.0, 2.0, 2.0])))
    X = _cell_and_margin_points(cell, margin, rng)
    if rect_disjoint(cell, obstacles, margin):
        assert not contains_points(obstacles, X).any()


def test_rect_disjoint_polytope_uses_distance():
    # triangle whose facets alone cannot separate the cell
    tri = HalfspacePolytope(np.array([[-1.0, 0.0], [0.0, -1.0], [1.0, 1.0]]), [0.0, 0.0, 1.0])
    cell = HyperRect([1.0, 1.0], [0.2, 0.2])
    assert rect_disjoint(cell, tri, 0.0)
    gap = (2.0 - 0.4 - 1.0) / np.sqrt(2)
    assert rect_disjoint(cell, tri, gap - 1e-3)
    assert not rect_disjoint(cell, tri, gap + 1e-3)


def test_complement_of_union_containment():
    safe = Intersection((HyperRect.from_bounds([0, 0], [5, 5]),
                         Complement(Union((HyperRect.from_bounds([2, 2], [3, 3]),)))))
    assert rect_fully_inside(HyperRect([1, 1], [0.05, 0.05]), safe, 0.07)
    assert not rect_fully_inside(HyperRect([1.95, 2.5], [0.05, 0.05]), safe, 0.07)
    assert not rect_fully_inside(HyperRect([0.05, 1], [0.05, 0.05]), safe, 0.07)
    assert region_contains(safe, [1.0, 1.0])
    assert not region_contains(safe, [2.5, 2.5])


def test_region_roundtrip():
    s = Intersection((HyperRect.from_bounds([0, 0], [5, 5]),
                      Complement(Union((Ball([1, 1], 0.3), HalfspacePolytope.from_box([2, 2], [3, 3]))))))
    t = region_from_dict(region_to_dict(s))
    X = np.random.default_rng(0).uniform(-1, 6, (3000, 2))
    assert np.array_equal(contains_points(s, X), contains_points(t, X))


def test_dimension_mismatch_raises():
    with pytest.raises(GeometryError):
        region_contains(Ball([0, 0], 1.0), [0, 0, 0])
    with pytest.raises(GeometryError):
        Union((Ball([0, 0], 1.0), Ball([0, 0, 0], 1.0)))
