"""Flexibility region of a feeder seen from its PCC.

Two constructions are provided.  ``corner_points_2bus`` solves the six
points where two operating limits of a two-bus feeder bind together.
``radial_scan`` pushes the PCC exchange as far as possible along rays from
the operating point with the feeder OPF, and ``reduce_polygon`` keeps the
few scan points that best describe the region as a convex polygon.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .feeder_opf import FeederError, FeederOpf
from .netmodel import NetworkCase, polygon_to_dict
from .nlp import NlpOptions
from .opf import linear_block
from .polygon import (
    CONTAINS_TOL, FlexPolygon, PolygonError, convex_hull, cross, half_plane_coeffs, polygon_area,
)

log = logging.getLogger(__name__)

DEDUP_MW = 1e-6
MAX_FAILURE_RATE = 0.2


class FlexError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScanPoint:
    theta: float  # degrees
    sense: str  # max | min
    dP: float
    dQ: float
    binding: tuple[str, ...] = ()
    setpoints: dict = field(default_factory=dict, compare=False, hash=False)


@dataclass(frozen=True)
class CornerPoint:
    label: str
    binding: tuple[str, str]
    dP: float
    dQ: float
    feasible: bool
    coincident_with: str | None = None
    setpoints: dict = field(default_factory=dict, compare=False, hash=False)


# ----------------------------------------------------------------------
# radial scan


def _direction(direction) -> tuple[float, float]:
    if np.isscalar(direction):
        th = math.radians(float(direction))
        return math.cos(th), math.sin(th)
    c, s = float(direction[0]), float(direction[1])
    r = math.hypot(c, s)
    if r == 0:
        raise ValueError("direction must be non-zero")
    return c / r, s / r


def fr_boundary_point(
    feeder: NetworkCase | FeederOpf,
    direction,
    sense: str = "max",
    opts: NlpOptions | None = None,
) -> ScanPoint:
    """Farthest feasible PCC deviation along a ray.

    ``direction`` is an angle in degrees or a vector ``(cos t, sin t)``.
    The objective ``+-(cos t dP + sin t dQ)`` is maximised subject to the
    feeder limits and ``dQ cos t - dP sin t = 0``, which keeps the point on
    the line through the origin without using ``tan t``.
    """
    fo = feeder if isinstance(feeder, FeederOpf) else FeederOpf(feeder)
    if sense not in ("max", "min"):
        raise ValueError("sense must be 'max' or 'min'")
    c, s = _direction(direction)
    sgn = 1.0 if sense == "max" else -1.0
    gp, gq = fo.deviation_rows()
    g = -sgn * (c * gp + s * gq)
    ray = linear_block((c * gq - s * gp)[None, :], [-(c * fo.Q0 - s * fo.P0) / fo.net.base], ["ray"])
    sol = fo.solve(lambda x: (float(g @ x), g), None, [ray], opts)
    theta = math.degrees(math.atan2(s, c))
    if not sol.ok:
        raise FeederError(f"boundary OPF failed at theta={theta:g} ({sense}): {sol.diagnostic}")
    dP, dQ = fo.deviation(sol.x)
    return ScanPoint(theta, sense, dP, dQ, tuple(sol.active_labels), fo.setpoints(sol.x).to_dict())


def scan_angles(dtheta: float) -> list[float]:
    n = 180.0 / dtheta
    if dtheta <= 0 or abs(n - round(n)) > 1e-9:
        raise ValueError(f"dtheta={dtheta:g} must divide 180")
    return [i * dtheta for i in range(int(round(n)) + 1)]


def dedupe(points: Iterable[ScanPoint], tol: float = DEDUP_MW) -> list[ScanPoint]:
    out: list[ScanPoint] = []
    for p in points:
        if all(abs(p.dP - q.dP) > tol or abs(p.dQ - q.dQ) > tol for q in out):
            out.append(p)
    return out


def radial_scan(
    feeder: NetworkCase,
    dtheta: float = 3.0,
    *,
    workers: int = 1,
    opts: NlpOptions | None = None,
) -> list[ScanPoint]:
    """Boundary points for every direction ``0, dtheta, ..., 180`` and both senses."""
    fo = FeederOpf(feeder)
    jobs = [(th, sense) for th in scan_angles(dtheta) for sense in ("max", "min")]

    def run(job):
        try:
            return fr_boundary_point(fo, job[0], job[1], opts)
        except FeederError as exc:
            log.warning("%s", exc)
            return None

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    ok = [r for r in results if r is not None]
    failed = len(jobs) - len(ok)
    if failed > MAX_FAILURE_RATE * len(jobs):
        raise FlexError(f"{failed} of {len(jobs)} scan directions failed")
    pts = dedupe(ok)
    if len(pts) < 3:
        raise FlexError("fewer than 3 distinct boundary points: no polygon possible")
    return pts


# ----------------------------------------------------------------------
# polygon reduction


def _xy(points) -> list[tuple[float, float]]:
    out = []
    for p in points:
        if isinstance(p, (ScanPoint, CornerPoint)):
            out.append((p.dP, p.dQ))
        else:
            out.append((float(p[0]), float(p[1])))
    return out


def point_line_distance(alpha: float, beta: float, p: Sequence[float], printed: bool = False) -> float:
    """Distance of ``p`` from ``alpha dP + beta dQ + 1 = 0``.

    ``printed=True`` uses the published variant without the square root in
    the denominator; it differs by a per-line constant factor.
    """
    num = abs(alpha * p[0] + beta * p[1] + 1.0)
    den = alpha * alpha + beta * beta
    return num / (den if printed else math.sqrt(den))


def farthest_exterior(vertices, candidates, printed: bool = False):
    """Per edge, the exterior candidate farthest from the edge line.

    Returns ``{edge_index: (candidate_index, distance)}`` for edges that
    have candidates strictly outside.
    """
    out = {}
    nv = len(vertices)
    for i in range(nv):
        a, b = half_plane_coeffs(vertices[i], vertices[(i + 1) % nv])
        best = None
        for k, p in enumerate(candidates):
            if a * p[0] + b * p[1] + 1.0 < -CONTAINS_TOL:
                d = point_line_distance(a, b, p, printed)
                if best is None or d > best[1]:
                    best = (k, d)
        if best is not None:
            out[i] = best
    return out


def reduce_polygon(
    points,
    target_vertices: int = 6,
    *,
    anchor: tuple[float, float] = (0.0, 0.0),
    metadata: dict | None = None,
    strict: bool = False,
) -> FlexPolygon:
    """Convex inner approximation using at most ``target_vertices`` points.

    Starts from the triangle of the minimum-dQ, maximum-dQ and minimum-dP
    points (which must contain the origin strictly) and repeatedly adds the
    exterior point farthest from the current polygon.  When that triangle
    misses the origin (for instance because both dQ extremes lie on one
    scan ray) the seed is extended with the points farthest beyond the
    offending edges, unless ``strict`` is set, in which case an error is
    raised.
    """
    xy = _xy(points)
    if target_vertices < 3:
        raise ValueError("target_vertices must be at least 3")
    if len(convex_hull(xy)) < 3:
        raise PolygonError("points are collinear")
    qmin = min(xy, key=lambda p: (p[1], p[0]))
    qmax = max(xy, key=lambda p: (p[1], -p[0]))
    pmin = min(xy, key=lambda p: (p[0], p[1]))
    pmax = max(xy, key=lambda p: (p[0], -p[1]))

    def contains_origin(poly):
        n = len(poly)
        return n >= 3 and all(cross(poly[i], poly[(i + 1) % n], (0.0, 0.0)) > 0 for i in range(n))

    tri = convex_hull([qmin, qmax, pmin])
    seed = "triangle"
    if not contains_origin(tri):
        if strict:
            raise PolygonError("origin is not strictly inside the initial triangle")
        # Max and min points of one scan direction are collinear with the
        # origin, so the named extremes may leave it on an edge.  Extend the
        # seed across every such edge with the point farthest beyond it.
        tri = convex_hull([qmin, qmax, pmin, pmax])
        seed = "extended"
        for _ in range(len(xy)):
            if contains_origin(tri):
                break
            n = len(tri)
            bad = next(i for i in range(n) if n < 3 or cross(tri[i], tri[(i + 1) % n], (0.0, 0.0)) <= 0)
            a, b = tri[bad], tri[(bad + 1) % n]
            cand = min(xy, key=lambda p: cross(a, b, p))
            if cross(a, b, cand) >= 0:
                break
            tri = convex_hull(tri + [cand])
        if not contains_origin(tri):
            raise PolygonError("origin is not strictly inside the hull of the points")
        # a small vertex budget may be below the extended seed: drop the
        # vertices costing the least area while the origin stays inside
        while len(tri) > target_vertices:
            trials = [tri[:i] + tri[i + 1:] for i in range(len(tri))]
            trials = [t for t in trials if contains_origin(t)]
            if not trials:
                raise PolygonError(f"no {target_vertices}-gon from the seed contains the origin")
            tri = max(trials, key=polygon_area)
    poly = tri
    while len(poly) < target_vertices:
        far = farthest_exterior(poly, xy)
        if not far:
            break
        # across edges the true distance decides; within an edge any variant agrees
        k = max(far.values(), key=lambda kd: kd[1])[0]
        poly = convex_hull(poly + [xy[k]])
    meta = {"method": "radial-scan", "n_points": len(xy), "target_vertices": target_vertices,
            "seed": seed}
    meta.update(metadata or {})
    return FlexPolygon(tuple(poly), anchor, meta)


# ----------------------------------------------------------------------
# two-bus corner points

CORNER_PAIRS = {
    "A": ("V_d^max", "V_g^max"),
    "B": ("V_d^max", "-Q_g^max"),
    "C": ("V_g^min", "-Q_g^max"),
    "D": ("V_d^min", "V_g^min"),
    "E": ("V_d^min", "Q_g^max"),
    "F": ("V_g^max", "Q_g^max"),
}


def _two_bus_layout(feeder: NetworkCase):
    if feeder.scope != "feeder" or len(feeder.buses) != 3 or len(feeder.ibgs) != 1 \
            or len([t for t in feeder.transformers if t.in_service]) != 1 \
            or len(feeder.generators) != 1:
        raise FlexError("corner points need the two-bus feeder topology "
                        "(one LTC bus, one IBG bus, one grid source)")
    tr = next(t for t in feeder.transformers if t.in_service)
    u = feeder.ibgs[0]
    if u.bus == tr.mv_bus or u.dispatchable:
        raise FlexError("two-bus feeder needs a constant-P IBG on the far bus")
    return tr.mv_bus, u.bus


def corner_points_2bus(feeder: NetworkCase, tol: float = 1e-7) -> list[CornerPoint]:
    """Solve the six double-binding points of a two-bus feeder."""
    d_id, g_id = _two_bus_layout(feeder)
    fo = FeederOpf(feeder)
    net, L = fo.net, fo.net.layout
    d, g = net.idx[d_id], net.idx[g_id]
    bd, bg = feeder.bus(d_id), feeder.bus(g_id)
    smax2 = net.i_smax[0] ** 2
    p = net.i_p0[0]
    iq = L.q_ibg.start
    free = np.zeros(L.size, dtype=bool)
    free[L.e] = free[L.f] = True
    free[L.q_gen] = free[L.q_ibg] = True
    free[L.dL] = True
    fi = np.flatnonzero(free)

    def cond(name):
        if name.startswith("V_"):
            b = d if name[2] == "d" else g
            v = (bd if b == d else bg)
            lim = v.V_max if name.endswith("max") else v.V_min

            def f(x):
                row = np.zeros(L.size)
                row[L.e.start + b] = 2 * x[L.e.start + b]
                row[L.f.start + b] = 2 * x[L.f.start + b]
                return x[L.e.start + b] ** 2 + x[L.f.start + b] ** 2 - lim * lim, row
            return f
        sign = -1.0 if name.startswith("-") else 1.0

        def f(x):
            s = x[L.e.start + g] ** 2 + x[L.f.start + g] ** 2
            q = math.sqrt(max(smax2 * s - p * p, 1e-300))
            row = np.zeros(L.size)
            row[iq] = 1.0
            row[L.e.start + g] = -sign * smax2 * x[L.e.start + g] / q
            row[L.f.start + g] = -sign * smax2 * x[L.f.start + g] / q
            return x[iq] - sign * q, row
        return f

    out = []
    for label, pair in CORNER_PAIRS.items():
        c1, c2 = cond(pair[0]), cond(pair[1])

        def system(x):
            r = net.residual(x)
            J = net.jacobian(x)
            v1, j1 = c1(x)
            v2, j2 = c2(x)
            return np.concatenate([r, [v1, v2]]), np.vstack([J, j1, j2])[:, fi]

        x = fo.x0.copy()
        F, J = system(x)
        nF = np.linalg.norm(F)
        for _ in range(60):
            if np.max(np.abs(F)) < 1e-11:
                break
            try:
                dx = np.linalg.solve(J, -F)
            except np.linalg.LinAlgError:
                break
            t = 1.0
            for _h in range(20):
                xt = x.copy()
                xt[fi] += t * dx
                Ft, Jt = system(xt)
                if np.linalg.norm(Ft) < nF:
                    break
                t *= 0.5
            x, F, J, nF = xt, Ft, Jt, np.linalg.norm(Ft)
        converged = bool(np.max(np.abs(F)) < 1e-9)
        dP, dQ = fo.deviation(x)
        feasible = converged and _feasible_2bus(x, net, L, d, g, bd, bg, smax2, p, tol)
        out.append(CornerPoint(label, pair, dP, dQ, feasible, None,
                               fo.setpoints(x).to_dict() if converged else {}))
    # flag coincident points
    flagged = []
    for i, cp in enumerate(out):
        twin = next((o.label for o in out[:i]
                     if o.feasible and cp.feasible
                     and abs(o.dP - cp.dP) <= 1e-6 and abs(o.dQ - cp.dQ) <= 1e-6), None)
        flagged.append(CornerPoint(cp.label, cp.binding, cp.dP, cp.dQ, cp.feasible, twin, cp.setpoints))
    return flagged


def _feasible_2bus(x, net, L, d, g, bd, bg, smax2, p, tol) -> bool:
    vd = math.hypot(x[L.e.start + d], x[L.f.start + d])
    vg = math.hypot(x[L.e.start + g], x[L.f.start + g])
    q = x[L.q_ibg.start]
    return (bd.V_min - tol <= vd <= bd.V_max + tol and bg.V_min - tol <= vg <= bg.V_max + tol
            and p * p + q * q <= smax2 * vg * vg * (1 + tol))


def corner_polygon(corners: list[CornerPoint], anchor=(0.0, 0.0)) -> FlexPolygon:
    pts = [(c.dP, c.dQ) for c in corners if c.feasible and c.coincident_with is None]
    if len(convex_hull(pts)) < 3:
        raise FlexError("fewer than 3 distinct feasible corner points")
    return FlexPolygon.from_points(pts, anchor, {"method": "corner-points",
                                                 "labels": [c.label for c in corners if c.feasible
                                                            and c.coincident_with is None]})


# ----------------------------------------------------------------------
# oracles


def grid_scan_2bus(feeder: NetworkCase, n: int = 201) -> np.ndarray:
    """Feasible (dP, dQ) samples of a two-bus feeder on a (V_d, V_g) grid.

    Independent of the OPF: for each pair of voltages the angle across the
    line follows from the IBG active power balance in closed form, and the
    PCC exchange from the transformer and line flows.  Samples violating
    the converter current limit are dropped.
    """
    d_id, g_id = _two_bus_layout(feeder)
    base = feeder.base_MVA
    br = next(b for b in feeder.branches if b.in_service)
    tr = next(t for t in feeder.transformers if t.in_service)
    u = feeder.ibgs[0]
    bd, bg = feeder.bus(d_id), feeder.bus(g_id)
    fo = FeederOpf(feeder)
    y = 1.0 / complex(br.R, br.X)
    G, B = y.real, y.imag
    p = u.P_g0 / base
    smax = u.S_nom * u.I_N / base
    loads_d = [ld for ld in feeder.loads if ld.bus == d_id]
    loads_g = [ld for ld in feeder.loads if ld.bus == g_id]
    vd_grid = np.linspace(bd.V_min, bd.V_max, n)
    vg_grid = np.linspace(bg.V_min, bg.V_max, n)
    VD, VG = np.meshgrid(vd_grid, vg_grid, indexing="ij")
    pl_g = sum(ld.P_0 / base * (VG / ld.V_0) ** ld.a for ld in loads_g) if loads_g else 0 * VG
    ql_g = sum(ld.Q_0 / base * (VG / ld.V_0) ** ld.b for ld in loads_g) if loads_g else 0 * VG
    # net P delivered into the line at g: P_g - P_load,g = G Vg^2 - Vg Vd (G cos t + B sin t)
    pin = p - pl_g
    A = G * VG**2 - pin
    R = VG * VD * math.hypot(G, B)
    phi = math.atan2(B, G)
    ratio = A / R
    ok = np.abs(ratio) <= 1.0
    ratio = np.clip(ratio, -1, 1)
    # stable branch: small angle
    # G cos t + B sin t = |y| cos(t - phi)
    t = phi + np.arccos(ratio)
    t = (t + np.pi) % (2 * np.pi) - np.pi
    t2 = phi - np.arccos(ratio)
    t2 = (t2 + np.pi) % (2 * np.pi) - np.pi
    t = np.where(np.abs(t) <= np.abs(t2), t, t2)
    # t is the angle of V_g relative to V_d
    qg_line = -B * VG**2 - VG * VD * (G * np.sin(t) - B * np.cos(t))
    q_ibg = qg_line + ql_g
    # flow into the line from d
    Vd = VD + 0j
    Vg = VG * np.exp(1j * t)
    S_dg = Vd * np.conj(y * (Vd - Vg))
    pl_d = sum(ld.P_0 / base * (VD / ld.V_0) ** ld.a for ld in loads_d) if loads_d else 0 * VD
    ql_d = sum(ld.Q_0 / base * (VD / ld.V_0) ** ld.b for ld in loads_d) if loads_d else 0 * VD
    St = S_dg + pl_d + 1j * ql_d
    Pj = St.real
    Qj = St.imag + tr.X_t * np.abs(St) ** 2 / VD**2
    ok &= q_ibg**2 + p * p <= (smax * VG) ** 2
    dP = Pj[ok] * base - fo.P0
    dQ = Qj[ok] * base - fo.Q0
    return np.column_stack([dP, dQ])


def feasibility_probe(feeder: NetworkCase, dP: float, dQ: float, tol_MVA: float = 1e-4,
                      fo: FeederOpf | None = None) -> bool:
    """True if the feeder can realise the deviation ``(dP, dQ)`` exactly."""
    from .control import SetpointCommand, track_setpoint

    fo = fo or FeederOpf(feeder)
    res = track_setpoint(fo, SetpointCommand(fo.P0 + dP, fo.Q0 + dQ))
    return res.distance <= tol_MVA


# ----------------------------------------------------------------------
# export


def polygon_json(poly: FlexPolygon, **extra) -> str:
    d = polygon_to_dict(poly)
    d["metadata"] = {**d["metadata"], **extra}
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


def polygon_csv(poly: FlexPolygon) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["vertex", "dP_MW", "dQ_Mvar", "alpha", "beta"])
    hp = poly.half_planes or [(float("nan"), float("nan"))]
    for i, (v, h) in enumerate(zip(poly.vertices, hp)):
        w.writerow([i, f"{v[0]:.10g}", f"{v[1]:.10g}", f"{h[0]:.10g}", f"{h[1]:.10g}"])
    return buf.getvalue()


def scan_csv(points: Sequence[ScanPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["theta_deg", "sense", "dP_MW", "dQ_Mvar", "binding"])
    for p in points:
        w.writerow([f"{p.theta:g}", p.sense, f"{p.dP:.10g}", f"{p.dQ:.10g}", ";".join(p.binding)])
    return buf.getvalue()


def timestamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
