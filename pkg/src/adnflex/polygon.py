"""Convex polygons in (dP, dQ) space and their half-plane description.

A flexibility polygon is stored as counterclockwise vertices around the
origin (the current operating point).  Each edge ``(v_i, v_{i+1})`` is
written as ``alpha * dP + beta * dQ + 1 >= 0``, which is only possible when
the origin lies strictly inside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

CONTAINS_TOL = 1e-9


class PolygonError(ValueError):
    pass


def half_plane_coeffs(v_i: Sequence[float], v_next: Sequence[float]) -> tuple[float, float]:
    """Coefficients ``(alpha, beta)`` of the line through two vertices.

    Normalised so that ``alpha*dP + beta*dQ + 1 = 0`` on the segment and the
    origin evaluates to +1.
    """
    p1, q1 = float(v_i[0]), float(v_i[1])
    p2, q2 = float(v_next[0]), float(v_next[1])
    d = p1 * q2 - p2 * q1
    if d == 0.0 or abs(d) <= 1e-14 * max(1.0, abs(p1 * q2), abs(p2 * q1)):
        raise PolygonError(
            f"edge ({p1:g},{q1:g})-({p2:g},{q2:g}) passes through the origin"
        )
    return (q1 - q2) / d, (p2 - p1) / d


def cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points: Iterable[Sequence[float]]) -> list[tuple[float, float]]:
    """Counterclockwise hull (monotone chain), collinear points dropped."""
    pts = sorted({(float(p[0]), float(p[1])) for p in points})
    if len(pts) <= 2:
        return pts
    lower: list[tuple[float, float]] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple[float, float]] = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def polygon_area(vertices: Sequence[Sequence[float]]) -> float:
    v = np.asarray(vertices, dtype=float)
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def diameter(vertices: Sequence[Sequence[float]]) -> float:
    v = np.asarray(vertices, dtype=float)
    if len(v) < 2:
        return 0.0
    d = v[:, None, :] - v[None, :, :]
    return float(np.sqrt((d**2).sum(-1)).max())


def _segment_distance(p, a, b) -> float:
    p, a, b = (np.asarray(x, dtype=float) for x in (p, a, b))
    ab = b - a
    den = float(ab @ ab)
    t = 0.0 if den == 0.0 else min(1.0, max(0.0, float((p - a) @ ab) / den))
    return float(np.linalg.norm(p - (a + t * ab)))


@dataclass(frozen=True)
class FlexPolygon:
    """Flexibility region approximated by a convex polygon.

    ``vertices`` are (dP [MW], dQ [Mvar]) pairs in counterclockwise order;
    ``anchor`` is the PCC consumption (P_j0, Q_j0) the deviations refer to.
    A single vertex at the origin denotes an ADN with no flexibility.
    """

    vertices: tuple[tuple[float, float], ...]
    anchor: tuple[float, float] = (0.0, 0.0)
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        verts = tuple((float(p), float(q)) for p, q in self.vertices)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "anchor", (float(self.anchor[0]), float(self.anchor[1])))
        if not verts:
            raise PolygonError("polygon needs at least one vertex")
        if self.is_degenerate:
            if verts[0] != (0.0, 0.0) or len(verts) != 1:
                raise PolygonError("a single-vertex polygon must be the origin")
            return
        if len(verts) < 3:
            raise PolygonError("polygon needs at least three vertices")
        if polygon_area(verts) <= 0:
            raise PolygonError("vertices must be counterclockwise with positive area")

    @classmethod
    def from_points(cls, points, anchor=(0.0, 0.0), metadata=None) -> "FlexPolygon":
        hull = convex_hull(points)
        if len(hull) < 3:
            raise PolygonError("points are collinear")
        return cls(tuple(hull), anchor, dict(metadata or {}))

    @classmethod
    def frozen(cls, anchor=(0.0, 0.0)) -> "FlexPolygon":
        return cls(((0.0, 0.0),), anchor, {"method": "frozen"})

    @property
    def is_degenerate(self) -> bool:
        return len(self.vertices) == 1

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def half_planes(self) -> tuple[tuple[float, float], ...]:
        if self.is_degenerate:
            return ()
        v = self.vertices
        return tuple(half_plane_coeffs(v[i], v[(i + 1) % len(v)]) for i in range(len(v)))

    def coefficient_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        hp = np.asarray(self.half_planes, dtype=float).reshape(-1, 2)
        return hp[:, 0], hp[:, 1]

    def evaluate(self, dP: float, dQ: float) -> np.ndarray:
        """Values of ``alpha*dP + beta*dQ + 1`` for every edge."""
        a, b = self.coefficient_arrays()
        return a * dP + b * dQ + 1.0

    @property
    def area(self) -> float:
        return polygon_area(self.vertices)

    @property
    def diameter(self) -> float:
        return diameter(self.vertices)

    def is_convex(self) -> bool:
        v = self.vertices
        n = len(v)
        if n < 3:
            return True
        return all(cross(v[i], v[(i + 1) % n], v[(i + 2) % n]) > 0 for i in range(n))

    def origin_interior(self) -> bool:
        if self.is_degenerate:
            return False
        v = self.vertices
        return all(cross(v[i], v[(i + 1) % len(v)], (0.0, 0.0)) > 0 for i in range(len(v)))

    def distance_outside(self, dP: float, dQ: float) -> float:
        """Euclidean distance from a point to the polygon (0 when inside)."""
        if self.is_degenerate:
            return math.hypot(dP, dQ)
        if polygon_contains(self, dP, dQ):
            return 0.0
        v = self.vertices
        return min(
            _segment_distance((dP, dQ), v[i], v[(i + 1) % len(v)]) for i in range(len(v))
        )

    def project(self, dP: float, dQ: float) -> tuple[float, float]:
        """Closest point of the polygon to ``(dP, dQ)``."""
        if self.is_degenerate or polygon_contains(self, dP, dQ):
            return (0.0, 0.0) if self.is_degenerate else (dP, dQ)
        best, best_d = None, math.inf
        v = self.vertices
        p = np.array([dP, dQ])
        for i in range(len(v)):
            a, b = np.array(v[i]), np.array(v[(i + 1) % len(v)])
            ab = b - a
            t = min(1.0, max(0.0, float((p - a) @ ab) / float(ab @ ab)))
            c = a + t * ab
            d = float(np.linalg.norm(p - c))
            if d < best_d:
                best, best_d = c, d
        return float(best[0]), float(best[1])

    def ray_intersection(self, direction: Sequence[float]) -> tuple[float, float]:
        """Boundary point hit by the ray from the origin along ``direction``."""
        u = np.asarray(direction, dtype=float)
        u = u / np.linalg.norm(u)
        a, b = self.coefficient_arrays()
        proj = a * u[0] + b * u[1]
        with np.errstate(divide="ignore"):
            t = np.where(proj < 0, -1.0 / proj, np.inf)
        s = float(t.min())
        return float(s * u[0]), float(s * u[1])


def polygon_contains(poly: FlexPolygon, dP: float, dQ: float) -> bool:
    """True iff every half-plane holds to within ``-1e-9``."""
    if poly.is_degenerate:
        return abs(dP) <= CONTAINS_TOL and abs(dQ) <= CONTAINS_TOL
    return bool(np.all(poly.evaluate(dP, dQ) >= -CONTAINS_TOL))


def hausdorff(a: FlexPolygon, b: FlexPolygon) -> float:
    """Symmetric Hausdorff distance between two convex polygonal regions.

    The distance from a point to a convex region is convex in the point, so
    the one-sided maxima are attained at vertices.
    """
    d_ab = max(b.distance_outside(*v) for v in a.vertices)
    d_ba = max(a.distance_outside(*v) for v in b.vertices)
    return max(d_ab, d_ba)
