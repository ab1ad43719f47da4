import json
import math

import numpy as np
import pytest

from adnflex import cases
from adnflex.feeder_opf import FeederError, FeederOpf
from adnflex.flex import (
    CORNER_PAIRS,
    FlexError,
    corner_points_2bus,
    corner_polygon,
    dedupe,
    feasibility_probe,
    fr_boundary_point,
    grid_scan_2bus,
    polygon_csv,
    polygon_json,
    radial_scan,
    reduce_polygon,
    scan_angles,
    scan_csv,
)
from adnflex.netmodel import polygon_from_dict
from adnflex.polygon import FlexPolygon, convex_hull, polygon_contains

CORNER_BINDINGS = {
    "A": {"V_d^max", "V_g^max"},
    "B": {"V_d^max", "-Q_g^max"},
    "C": {"V_g^min", "-Q_g^max"},
    "D": {"V_d^min", "V_g^min"},
    "E": {"V_d^min", "Q_g^max"},
    "F": {"V_g^max", "Q_g^max"},
}


def _boundary_distance(poly, p):
    v = poly.vertices
    best = math.inf
    for i in range(len(v)):
        a, b = np.array(v[i]), np.array(v[(i + 1) % len(v)])
        ab = b - a
        t = min(1.0, max(0.0, float((p - a) @ ab / (ab @ ab))))
        best = min(best, float(np.linalg.norm(p - a - t * ab)))
    return best


def test_vertical_ray_has_no_active_component(table2_opf):
    pt = fr_boundary_point(table2_opf, 90.0, "max")
    assert abs(pt.dP) <= 1e-6
    assert pt.dQ > 0 and pt.binding
    vec = fr_boundary_point(table2_opf, (0.0, 1.0), "max")
    assert vec.dQ == pytest.approx(pt.dQ, abs=1e-6)


def test_active_extremes_set_by_voltage_bounds(table2_opf):
    hi = fr_boundary_point(table2_opf, 0.0, "max")
    lo = fr_boundary_point(table2_opf, 0.0, "min")
    assert hi.dP > 0 > lo.dP
    assert abs(hi.dQ) <= 1e-6 and abs(lo.dQ) <= 1e-6
    assert any(b.startswith("V_") for b in hi.binding)
    assert any(b.startswith("V_") for b in lo.binding)


def test_boundary_point_is_outward_infeasible(table2, table2_opf):
    for th, sense in [(0.0, "max"), (45.0, "min"), (120.0, "max")]:
        pt = fr_boundary_point(table2_opf, th, sense)
        assert feasibility_probe(table2, pt.dP, pt.dQ, tol_MVA=1e-3, fo=table2_opf)
        r = math.hypot(pt.dP, pt.dQ)
        push = 1 + 0.1 / r  # 1e-3 pu on a 100 MVA base
        assert not feasibility_probe(table2, pt.dP * push, pt.dQ * push, tol_MVA=1e-4, fo=table2_opf)


def test_boundary_point_matches_grid_oracle(table2, table2_opf, table2_corners):
    grid = grid_scan_2bus(table2, 401)
    diam = corner_polygon(table2_corners).diameter
    hi = fr_boundary_point(table2_opf, 0.0, "max")
    near_axis = grid[np.abs(grid[:, 1]) <= 0.25]
    assert abs(hi.dP - near_axis[:, 0].max()) <= 0.002 * diam


def test_corner_labels_and_binding_pairs(table2_corners):
    assert [c.label for c in table2_corners] == list("ABCDEF")
    for c in table2_corners:
        assert set(c.binding) == CORNER_BINDINGS[c.label] == set(CORNER_PAIRS[c.label])
        assert c.feasible and c.coincident_with is None


def test_corners_match_grid_hull(table2, table2_corners):
    poly = corner_polygon(table2_corners)
    hull = FlexPolygon(tuple(convex_hull(grid_scan_2bus(table2, 301))))
    from adnflex.polygon import hausdorff

    assert hausdorff(poly, hull) <= 0.01 * poly.diameter


def test_collapsed_ibg_voltage_range(table2):
    buses = tuple(b if b.id != "g" else type(b)(b.id, b.kind, 1.0, 1.0, b.base_kV) for b in table2.buses)
    corners = corner_points_2bus(table2.replace(buses=buses))
    assert len(corners) == 6
    # with V_g pinned the region is a curve: at most two distinct feasible corners remain
    ok = [c for c in corners if c.feasible and c.coincident_with is None]
    assert len(ok) <= 2
    with pytest.raises(FlexError):
        corner_polygon(corners)


def test_corners_need_two_bus_topology(feeder30):
    with pytest.raises(FlexError):
        corner_points_2bus(feeder30)


def test_scan_angles_and_point_budget(table2_scan):
    assert len(scan_angles(3.0)) == 61
    assert len(table2_scan) <= 122
    with pytest.raises(ValueError):
        scan_angles(7.0)


def test_coarse_scan_is_a_cross(table2):
    pts = radial_scan(table2, 90.0)
    assert len(pts) >= 4
    assert {p.theta for p in pts} <= {0.0, 90.0, 180.0}


def test_scan_points_lie_on_corner_polygon(table2_scan, table2_corners):
    poly = corner_polygon(table2_corners)
    for p in table2_scan:
        assert _boundary_distance(poly, np.array([p.dP, p.dQ])) <= 0.01 * poly.diameter
        assert abs(p.dQ * math.cos(math.radians(p.theta)) - p.dP * math.sin(math.radians(p.theta))) <= 1e-6


def test_dedupe():
    from adnflex.flex import ScanPoint

    a = ScanPoint(0.0, "max", 1.0, 0.0, ("x",))
    b = ScanPoint(180.0, "min", 1.0 + 1e-9, 0.0, ("x",))
    assert len(dedupe([a, b])) == 1


def test_failed_directions_abort_scan(table2, monkeypatch):
    import adnflex.flex as flex

    def broken(*args, **kw):
        raise FeederError("forced failure")

    monkeypatch.setattr(flex, "fr_boundary_point", broken)
    with pytest.raises(FlexError, match="failed"):
        radial_scan(table2, 30.0)


def test_reduced_polygon_properties(table2_scan, table2):
    anchor = cases.pcc_exchange(table2)
    poly = reduce_polygon(table2_scan, 6, anchor=anchor)
    assert poly.n_vertices == 6 and poly.is_convex() and poly.origin_interior()
    assert poly.anchor == anchor
    pts = {(p.dP, p.dQ) for p in table2_scan}
    assert set(poly.vertices) <= pts


def test_polygon_exports(table2_scan, table2):
    poly = reduce_polygon(table2_scan, 6, anchor=cases.pcc_exchange(table2), metadata={"dtheta": 3.0})
    doc = json.loads(polygon_json(poly, generated="t"))
    again = polygon_from_dict(doc)
    assert again.vertices == poly.vertices and again.anchor == poly.anchor
    assert doc["metadata"]["dtheta"] == 3.0
    rows = polygon_csv(poly).splitlines()
    assert rows[0] == "vertex,dP_MW,dQ_Mvar,alpha,beta" and len(rows) == 7
    assert scan_csv(table2_scan).count("\n") == len(table2_scan) + 1


def test_parallel_scan_matches_serial(table2):
    a = radial_scan(table2, 30.0)
    b = radial_scan(table2, 30.0, workers=4)
    assert [(p.dP, p.dQ) for p in a] == [(p.dP, p.dQ) for p in b]


@pytest.mark.slow
def test_feeder30_reduction(feeder30_scan):
    hull = FlexPolygon.from_points([(p.dP, p.dQ) for p in feeder30_scan])
    hexagon = reduce_polygon(feeder30_scan, 6)
    octagon = reduce_polygon(feeder30_scan, 8)
    assert hexagon.area / hull.area > 0.8
    assert octagon.area / hull.area >= 0.9
    assert all(polygon_contains(hull, *v) for v in hexagon.vertices)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="round current-limit boundary: six vertices cover about 85% of the hull")
def test_feeder30_hexagon_area_target(feeder30_scan):
    hull = FlexPolygon.from_points([(p.dP, p.dQ) for p in feeder30_scan])
    assert reduce_polygon(feeder30_scan, 6).area / hull.area >= 0.9
