import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from adnflex.flex import farthest_exterior, point_line_distance, reduce_polygon
from adnflex.polygon import (
    FlexPolygon,
    PolygonError,
    convex_hull,
    half_plane_coeffs,
    hausdorff,
    polygon_contains,
)


def test_symmetric_segment():
    assert half_plane_coeffs((1, 0), (0, 1)) == pytest.approx((-1.0, -1.0))


def test_vertical_segment_erratum():
    alpha, beta = half_plane_coeffs((2, 0), (2, 1))
    assert (alpha, beta) == pytest.approx((-0.5, 0.0))
    # the constraint reads dP <= 2 and contains both endpoints
    for p in [(2, 0), (2, 1), (2, -5)]:
        assert alpha * p[0] + beta * p[1] + 1 == pytest.approx(0.0, abs=1e-12)
    # the printed assignment would give (0, -0.5), i.e. dQ <= 2, missing (2, 0) -> 2 != 0
    printed_a, printed_b = 0.0, -0.5
    assert printed_a * 2 + printed_b * 0 + 1 != 0


def test_edge_through_origin_rejected():
    with pytest.raises(PolygonError):
        half_plane_coeffs((1, 1), (-1, -1))


@st.composite
def convex_polygons(draw):
    n = draw(st.integers(3, 12))
    angles = sorted(draw(st.lists(st.floats(0, 2 * math.pi, exclude_max=True), min_size=n, max_size=n,
                                  unique=True)))
    radii = draw(st.lists(st.floats(0.5, 100.0), min_size=n, max_size=n))
    pts = [(r * math.cos(a), r * math.sin(a)) for a, r in zip(angles, radii)]
    hull = convex_hull(pts)
    assume(len(hull) >= 3)
    poly = FlexPolygon(tuple(hull))
    assume(poly.origin_interior())
    # keep the origin clear of the edges so D is well conditioned
    assume(min(poly.evaluate(0.0, 0.0)) > 0 and all(
        abs(v[0] * w[1] - w[0] * v[1]) > 1e-3 for v, w in zip(hull, hull[1:] + hull[:1])))
    return poly


@settings(max_examples=200, deadline=None)
@given(convex_polygons())
def test_half_planes_vanish_on_edges(poly):
    v = poly.vertices
    for i, (a, b) in enumerate(poly.half_planes):
        for p in (v[i], v[(i + 1) % len(v)]):
            assert a * p[0] + b * p[1] + 1 == pytest.approx(0.0, abs=1e-10)
    np.testing.assert_allclose(poly.evaluate(0.0, 0.0), 1.0)
    assert len(poly.half_planes) == poly.n_vertices


@settings(max_examples=100, deadline=None)
@given(convex_polygons())
def test_containment(poly):
    assert polygon_contains(poly, 0.0, 0.0)
    assert poly.is_convex()
    for p in poly.vertices:
        assert polygon_contains(poly, *p)
    # push each edge midpoint outwards from the origin
    v = poly.vertices
    for i in range(len(v)):
        m = ((v[i][0] + v[(i + 1) % len(v)][0]) / 2, (v[i][1] + v[(i + 1) % len(v)][1]) / 2)
        assert not polygon_contains(poly, 1.01 * m[0], 1.01 * m[1])


def test_scaled_vertex_outside_square():
    sq = FlexPolygon(((1, -1), (1, 1), (-1, 1), (-1, -1)))
    assert not polygon_contains(sq, 1.01, 1.01)
    assert polygon_contains(sq, 1.0, 1.0)


def test_degenerate_polygon():
    p = FlexPolygon.frozen((5.0, 1.0))
    assert p.is_degenerate and p.half_planes == ()
    assert polygon_contains(p, 0.0, 0.0)
    assert not polygon_contains(p, 1e-3, 0.0)


def test_reduce_square_gives_corners():
    pts = [(1, 1), (-1, 1), (-1, -1), (1, -1), (0.5, 0), (0, 0.5), (-0.2, -0.3)]
    poly = reduce_polygon(pts, 6)
    assert sorted(poly.vertices) == sorted([(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)])


def test_reduce_collinear_rejected():
    with pytest.raises(PolygonError):
        reduce_polygon([(0, 0), (1, 1), (2, 2), (-1, -1)], 6)


def test_reduce_strict_seed():
    # dQ extremes on the vertical ray: the triangle (Qmin, Qmax, Pmin) has the origin on an edge
    pts = [(0, -2), (0, 3), (-1, 0), (2, 0), (1.5, 1.5)]
    with pytest.raises(PolygonError):
        reduce_polygon(pts, 6, strict=True)
    poly = reduce_polygon(pts, 6)
    assert poly.origin_interior()
    assert poly.metadata["seed"] == "extended"


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 8))
def test_reduction_is_inner_approximation(seed, k):
    rng = np.random.default_rng(seed)
    th = rng.uniform(0, 2 * np.pi, 60)
    r = rng.uniform(1, 10, 60)
    pts = list(zip(r * np.cos(th), r * np.sin(th)))
    hull = FlexPolygon(tuple(convex_hull(pts)))
    assume(hull.origin_interior())
    try:
        poly = reduce_polygon(pts, k)
    except PolygonError:
        return
    assert poly.n_vertices <= k
    assert set(poly.vertices) <= {(float(x), float(y)) for x, y in pts}
    assert all(polygon_contains(hull, *v) for v in poly.vertices)
    assert poly.area <= hull.area + 1e-9


@settings(max_examples=50, deadline=None)
@given(convex_polygons(), st.integers(0, 2**32 - 1))
def test_printed_distance_selects_same_point(poly, seed):
    rng = np.random.default_rng(seed)
    cands = [tuple(2.0 * np.array(v) * rng.uniform(0.9, 1.5)) for v in poly.vertices]
    exact = farthest_exterior(poly.vertices, cands)
    printed = farthest_exterior(poly.vertices, cands, printed=True)
    assert {e: kd[0] for e, kd in exact.items()} == {e: kd[0] for e, kd in printed.items()}


def test_point_line_distance():
    a, b = half_plane_coeffs((2, 0), (2, 1))
    assert point_line_distance(a, b, (5, 0)) == pytest.approx(3.0)
    assert point_line_distance(a, b, (5, 0), printed=True) == pytest.approx(6.0)


def test_hausdorff_of_nested_squares():
    big = FlexPolygon(((2, -2), (2, 2), (-2, 2), (-2, -2)))
    small = FlexPolygon(((1, -1), (1, 1), (-1, 1), (-1, -1)))
    assert hausdorff(big, small) == pytest.approx(math.sqrt(2))
    assert hausdorff(small, small) == 0.0
