"""Rectangular-coordinate power balance, Newton power flow and continuation.

The state of a network is the vector

    x = [e, f, q_gen, q_ibg, p_ibg, dp_adn, dq_adn, dL, lam]

with bus voltages ``V = e + j f`` and every quantity in per unit on the
case base.  Generators follow a distributed slack: each in-service machine
produces ``P_g0 + w (dL + lam * sum(d_p))``.  The residual holds the active
and reactive balance of every bus plus the angle reference ``f_slack = 0``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import gencaps
from .netmodel import CaseError, NetworkCase, StressDirection

log = logging.getLogger(__name__)

PF_TOL = 1e-8
PF_MAX_ITER = 50
PF_MAX_HALVINGS = 8


class PowerFlowError(RuntimeError):
    """Newton power flow failed; ``last`` holds the last iterate if any."""

    def __init__(self, msg: str, last=None):
        super().__init__(msg)
        self.last = last


class DimensionError(ValueError):
    pass


@dataclass
class OperatingPoint:
    """Per-unit solved or trial state.  ``info`` carries solver metadata."""

    e: np.ndarray
    f: np.ndarray
    q_gen: np.ndarray
    q_ibg: np.ndarray
    p_ibg: np.ndarray
    dp_adn: np.ndarray
    dq_adn: np.ndarray
    dL: float = 0.0
    lam: float = 0.0
    info: dict = field(default_factory=dict, compare=False)

    @property
    def V(self) -> np.ndarray:
        return self.e + 1j * self.f

    @property
    def vm(self) -> np.ndarray:
        return np.hypot(self.e, self.f)

    def copy(self) -> "OperatingPoint":
        return OperatingPoint(
            self.e.copy(), self.f.copy(), self.q_gen.copy(), self.q_ibg.copy(),
            self.p_ibg.copy(), self.dp_adn.copy(), self.dq_adn.copy(), self.dL, self.lam,
            dict(self.info),
        )


class Layout:
    """Index map of the flat state vector."""

    def __init__(self, n: int, ng: int, ni: int, na: int):
        self.n, self.ng, self.ni, self.na = n, ng, ni, na
        o = 0
        self.e = slice(o, o + n); o += n
        self.f = slice(o, o + n); o += n
        self.q_gen = slice(o, o + ng); o += ng
        self.q_ibg = slice(o, o + ni); o += ni
        self.p_ibg = slice(o, o + ni); o += ni
        self.dp_adn = slice(o, o + na); o += na
        self.dq_adn = slice(o, o + na); o += na
        self.dL = o; o += 1
        self.lam = o; o += 1
        self.size = o

    def pack(self, pt: OperatingPoint) -> np.ndarray:
        x = np.empty(self.size)
        parts = [
            (self.e, pt.e, self.n), (self.f, pt.f, self.n), (self.q_gen, pt.q_gen, self.ng),
            (self.q_ibg, pt.q_ibg, self.ni), (self.p_ibg, pt.p_ibg, self.ni),
            (self.dp_adn, pt.dp_adn, self.na), (self.dq_adn, pt.dq_adn, self.na),
        ]
        for sl, val, size in parts:
            val = np.asarray(val, dtype=float)
            if val.shape != (size,):
                raise DimensionError(f"expected {size} entries, got shape {val.shape}")
            x[sl] = val
        x[self.dL] = pt.dL
        x[self.lam] = pt.lam
        return x

    def unpack(self, x: np.ndarray, info: dict | None = None) -> OperatingPoint:
        if x.shape != (self.size,):
            raise DimensionError(f"state vector has shape {x.shape}, expected ({self.size},)")
        return OperatingPoint(
            x[self.e].copy(), x[self.f].copy(), x[self.q_gen].copy(), x[self.q_ibg].copy(),
            x[self.p_ibg].copy(), x[self.dp_adn].copy(), x[self.dq_adn].copy(),
            float(x[self.dL]), float(x[self.lam]), dict(info or {}),
        )


def build_ybus(case: NetworkCase, idx: dict[str, int]) -> np.ndarray:
    n = len(case.buses)
    Y = np.zeros((n, n), dtype=complex)
    for b, i in idx.items():
        bus = case.buses[i]
        Y[i, i] += complex(bus.g_sh, bus.b_sh)
    for r in case.branches:
        if not r.in_service:
            continue
        i, j = idx[r.from_bus], idx[r.to_bus]
        y = 1.0 / complex(r.R, r.X)
        ysh = 0.5j * r.B_c
        Y[i, i] += y + ysh
        Y[j, j] += y + ysh
        Y[i, j] -= y
        Y[j, i] -= y
    for t in case.transformers:
        if not t.in_service:
            continue
        i, j = idx[t.hv_bus], idx[t.mv_bus]
        y = 1.0 / complex(0.0, t.X_t)
        Y[i, i] += y / t.tap**2
        Y[j, j] += y
        Y[i, j] -= y / t.tap
        Y[j, i] -= y / t.tap
    return Y


class Network:
    """Per-unit arrays compiled from a :class:`NetworkCase`.

    ``limited`` maps generator ids to the active power [MW] they are frozen
    at; those machines drop out of the distributed slack and the remaining
    participation factors are renormalised.
    """

    def __init__(self, case: NetworkCase, limited: dict[str, float] | None = None):
        self.case = case
        base = self.base = case.base_MVA
        self.idx = case.bus_index()
        n = self.n = len(case.buses)
        if n == 0:
            raise CaseError("no slack bus")
        self.slack = self.idx[case.slack_bus.id]
        self.Y = build_ybus(case, self.idx)

        feeder = case.scope == "feeder"
        self.ld_ids = [ld.id for ld in case.loads]
        self.ld_bus = np.array([self.idx[ld.bus] for ld in case.loads], dtype=int)
        self.ld_p = np.array([ld.P_0 for ld in case.loads]) / base
        self.ld_q = np.array([ld.Q_0 for ld in case.loads]) / base
        self.ld_v0 = np.array([ld.V_0 for ld in case.loads], dtype=float)
        # constant power at transmission level (restored by LTCs)
        self.ld_a = np.array([ld.a if feeder else 0.0 for ld in case.loads], dtype=float)
        self.ld_b = np.array([ld.b if feeder else 0.0 for ld in case.loads], dtype=float)

        gens = [g for g in case.generators if g.in_service]
        self.gens = gens
        self.limited = dict(limited or {})
        self.g_ids = [g.id for g in gens]
        self.g_bus = np.array([self.idx[g.bus] for g in gens], dtype=int)
        self.g_p0 = np.array(
            [self.limited.get(g.id, g.P_g0) for g in gens], dtype=float
        ) / base
        w = np.array([0.0 if g.id in self.limited else g.w for g in gens], dtype=float)
        if gens and w.sum() <= 0:
            raise CaseError("all generators limited: no slack capacity")
        self.g_w = w / w.sum() if gens else w
        self.g_vref = np.array([g.V_ref for g in gens], dtype=float)
        self.g_caps = [g.caps for g in gens]

        self.ibgs = list(case.ibgs)
        self.i_ids = [u.id for u in case.ibgs]
        self.i_bus = np.array([self.idx[u.bus] for u in case.ibgs], dtype=int)
        self.i_p0 = np.array([u.P_g0 for u in case.ibgs], dtype=float) / base
        self.i_vset = np.array([u.V_set for u in case.ibgs], dtype=float)
        self.i_smax = np.array([u.S_nom * u.I_N for u in case.ibgs], dtype=float) / base
        self.i_pmin = np.array([u.p_range[0] for u in case.ibgs], dtype=float) / base
        self.i_pmax = np.array([u.p_range[1] for u in case.ibgs], dtype=float) / base

        self.adns = list(case.adns)
        self.a_ids = [a.id for a in case.adns]
        self.a_bus = np.array([self.idx[a.pcc_bus] for a in case.adns], dtype=int)
        self.a_p0 = np.array([a.P_j0 for a in case.adns], dtype=float) / base
        self.a_q0 = np.array([a.Q_j0 for a in case.adns], dtype=float) / base

        self.d_p = np.zeros(n)
        self.d_q = np.zeros(n)
        if case.stress is not None:
            for b, v in case.stress.d_p.items():
                self.d_p[self.idx[b]] += v / base
            for b, v in case.stress.d_q.items():
                self.d_q[self.idx[b]] += v / base
        self.sum_dp = float(self.d_p.sum())

        self.layout = Layout(n, len(gens), len(self.ibgs), len(self.adns))
        self.nres = 2 * n + 1

    # ------------------------------------------------------------------
    def with_limited(self, limited: dict[str, float]) -> "Network":
        return Network(self.case, limited)

    def flat_start(self) -> OperatingPoint:
        n = self.n
        e = np.ones(n)
        for k, b in enumerate(self.g_bus):
            e[b] = self.g_vref[k]
        for k, b in enumerate(self.i_bus):
            e[b] = self.i_vset[k]
        return OperatingPoint(
            e, np.zeros(n), np.zeros(len(self.gens)), np.zeros(len(self.ibgs)),
            self.i_p0.copy(), np.zeros(len(self.adns)), np.zeros(len(self.adns)), 0.0, 0.0,
        )

    def gen_p(self, x: np.ndarray) -> np.ndarray:
        L = self.layout
        return self.g_p0 + self.g_w * (x[L.dL] + x[L.lam] * self.sum_dp)

    def load_pq(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-load consumption (pu) at the voltages in ``x``."""
        L = self.layout
        e, f = x[L.e][self.ld_bus], x[L.f][self.ld_bus]
        s = e * e + f * f
        p = self.ld_p * (s / self.ld_v0**2) ** (self.ld_a / 2)
        q = self.ld_q * (s / self.ld_v0**2) ** (self.ld_b / 2)
        return p, q

    def injections(self, x: np.ndarray) -> np.ndarray:
        L = self.layout
        V = x[L.e] + 1j * x[L.f]
        return V * np.conj(self.Y @ V)

    def demand(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-bus consumption (pu): loads, ADN exchanges and stress."""
        L = self.layout
        n = self.n
        pl, ql = self.load_pq(x)
        P = np.bincount(self.ld_bus, pl, n) if len(pl) else np.zeros(n)
        Q = np.bincount(self.ld_bus, ql, n) if len(ql) else np.zeros(n)
        if len(self.a_bus):
            P = P + np.bincount(self.a_bus, self.a_p0 + x[L.dp_adn], n)
            Q = Q + np.bincount(self.a_bus, self.a_q0 + x[L.dq_adn], n)
        lam = x[L.lam]
        return P + lam * self.d_p, Q + lam * self.d_q

    def generation(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        L = self.layout
        n = self.n
        P = np.zeros(n)
        Q = np.zeros(n)
        if len(self.g_bus):
            P += np.bincount(self.g_bus, self.gen_p(x), n)
            Q += np.bincount(self.g_bus, x[L.q_gen], n)
        if len(self.i_bus):
            P += np.bincount(self.i_bus, x[L.p_ibg], n)
            Q += np.bincount(self.i_bus, x[L.q_ibg], n)
        return P, Q

    # ------------------------------------------------------------------
    def residual(self, x: np.ndarray) -> np.ndarray:
        L = self.layout
        if x.shape != (L.size,):
            raise DimensionError(f"state vector has shape {x.shape}, expected ({L.size},)")
        S = self.injections(x)
        Pd, Qd = self.demand(x)
        Pg, Qg = self.generation(x)
        r = np.empty(self.nres)
        r[: self.n] = S.real - Pg + Pd
        r[self.n : 2 * self.n] = S.imag - Qg + Qd
        r[-1] = x[L.f][self.slack]
        return r

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        L = self.layout
        if x.shape != (L.size,):
            raise DimensionError(f"state vector has shape {x.shape}, expected ({L.size},)")
        n = self.n
        V = x[L.e] + 1j * x[L.f]
        I = self.Y @ V
        dS_de = np.diag(np.conj(I)) + np.diag(V) @ np.conj(self.Y)
        dS_df = 1j * np.diag(np.conj(I)) - 1j * np.diag(V) @ np.conj(self.Y)
        J = np.zeros((self.nres, L.size))
        J[:n, L.e] = dS_de.real
        J[:n, L.f] = dS_df.real
        J[n : 2 * n, L.e] = dS_de.imag
        J[n : 2 * n, L.f] = dS_df.imag

        if len(self.ld_bus):
            e, f = x[L.e][self.ld_bus], x[L.f][self.ld_bus]
            s = e * e + f * f
            cp = self.ld_p * self.ld_a * s ** (self.ld_a / 2 - 1) / self.ld_v0**self.ld_a
            cq = self.ld_q * self.ld_b * s ** (self.ld_b / 2 - 1) / self.ld_v0**self.ld_b
            eb, fb = L.e.start + self.ld_bus, L.f.start + self.ld_bus
            np.add.at(J, (self.ld_bus, eb), cp * e)
            np.add.at(J, (self.ld_bus, fb), cp * f)
            np.add.at(J, (n + self.ld_bus, eb), cq * e)
            np.add.at(J, (n + self.ld_bus, fb), cq * f)

        for k, b in enumerate(self.g_bus):
            J[b, L.dL] -= self.g_w[k]
            J[b, L.lam] -= self.g_w[k] * self.sum_dp
            J[n + b, L.q_gen.start + k] -= 1.0
        for k, b in enumerate(self.i_bus):
            J[b, L.p_ibg.start + k] -= 1.0
            J[n + b, L.q_ibg.start + k] -= 1.0
        for k, b in enumerate(self.a_bus):
            J[b, L.dp_adn.start + k] += 1.0
            J[n + b, L.dq_adn.start + k] += 1.0
        J[:n, L.lam] += self.d_p
        J[n : 2 * n, L.lam] += self.d_q
        J[-1, L.f.start + self.slack] = 1.0
        return J

    def hessian(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Hessian of ``y @ residual(x)`` with respect to the full state."""
        L = self.layout
        n = self.n
        mu, nu = y[:n], y[n : 2 * n]
        M = (mu - 1j * nu)[:, None] * np.conj(self.Y)
        A, B = M.real, M.imag
        H = np.zeros((L.size, L.size))
        AA = A + A.T
        BB = B - B.T
        H[L.e, L.e] = AA
        H[L.f, L.f] = AA
        H[L.e, L.f] = BB
        H[L.f, L.e] = BB.T
        if len(self.ld_bus):
            e, f = x[L.e][self.ld_bus], x[L.f][self.ld_bus]
            s = e * e + f * f
            wp = mu[self.ld_bus] * self.ld_p / self.ld_v0**self.ld_a
            wq = nu[self.ld_bus] * self.ld_q / self.ld_v0**self.ld_b
            c1 = wp * self.ld_a * s ** (self.ld_a / 2 - 1) + wq * self.ld_b * s ** (self.ld_b / 2 - 1)
            c2 = (wp * self.ld_a * (self.ld_a - 2) * s ** (self.ld_a / 2 - 2)
                  + wq * self.ld_b * (self.ld_b - 2) * s ** (self.ld_b / 2 - 2))
            eb, fb = L.e.start + self.ld_bus, L.f.start + self.ld_bus
            np.add.at(H, (eb, eb), c1 + c2 * e * e)
            np.add.at(H, (fb, fb), c1 + c2 * f * f)
            np.add.at(H, (eb, fb), c2 * e * f)
            np.add.at(H, (fb, eb), c2 * e * f)
        return H


# ----------------------------------------------------------------------
# public functional API


def residual(case: NetworkCase | Network, pt: OperatingPoint) -> np.ndarray:
    net = case if isinstance(case, Network) else Network(case)
    return net.residual(net.layout.pack(pt))


def jacobian(case: NetworkCase | Network, pt: OperatingPoint) -> np.ndarray:
    net = case if isinstance(case, Network) else Network(case)
    return net.jacobian(net.layout.pack(pt))


def apply_stress(
    case: NetworkCase,
    direction: StressDirection | None,
    lam: float,
    adjustments: dict[str, tuple[float, float]] | None = None,
) -> dict[str, tuple[float, float]]:
    """Per-bus constant-power consumption (MW, Mvar) at stress level ``lam``.

    ADN buses carry their PCC exchange plus the optional ``(dP_j, dQ_j)``.
    """
    direction = direction or StressDirection()
    out = {b.id: [0.0, 0.0] for b in case.buses}
    for ld in case.loads:
        out[ld.bus][0] += ld.P_0
        out[ld.bus][1] += ld.Q_0
    adjustments = adjustments or {}
    for a in case.adns:
        dp, dq = adjustments.get(a.id, (0.0, 0.0))
        out[a.pcc_bus][0] += a.P_j0 + dp
        out[a.pcc_bus][1] += a.Q_j0 + dq
    for b, v in direction.d_p.items():
        out[b][0] += lam * v
    for b, v in direction.d_q.items():
        out[b][1] += lam * v
    return {k: (v[0], v[1]) for k, v in out.items()}


def generation_shift(
    case: NetworkCase, dP: float, dL: float, limited: set[str] | frozenset = frozenset()
) -> dict[str, float]:
    """Distributed-slack shifts ``w_k (dL + dP)`` in MW.

    Machines listed in ``limited``, and machines already sitting at the
    bound the shift would push them through, are excluded; the remaining
    participation factors are renormalised so the shifts always add up to
    ``dL + dP``.
    """
    total = dL + dP
    gens = [g for g in case.generators if g.in_service]
    out = {g.id: 0.0 for g in gens}
    if total == 0.0:
        return out
    free = []
    for g in gens:
        if g.id in limited or g.w <= 0:
            continue
        if total > 0 and g.P_max is not None and g.P_g0 >= g.P_max:
            continue
        if total < 0 and g.P_min is not None and g.P_g0 <= g.P_min:
            continue
        free.append(g)
    wsum = sum(g.w for g in free)
    if not free or wsum <= 0:
        raise CaseError("all generators limited: no slack capacity")
    for g in free:
        out[g.id] = g.w / wsum * total
    return out


# ----------------------------------------------------------------------
# Newton power flow


@dataclass
class _Modes:
    gen: list[str]  # 'pv' | 'armature' | 'field'
    gen_K: list[float]
    ibg: list[str]  # 'pv' | 'qmax' | 'qmin'


def _solve_fixed_modes(net: Network, x0: np.ndarray, modes: _Modes, tol: float, max_iter: int):
    L = net.layout
    free = np.zeros(L.size, dtype=bool)
    free[L.e] = True
    free[L.f] = True
    free[L.q_gen] = True
    free[L.q_ibg] = True
    free[L.dL] = True
    fi = np.flatnonzero(free)
    base = net.base

    def control(x):
        e, f = x[L.e], x[L.f]
        s = e * e + f * f
        pg = net.gen_p(x)
        F = []
        rows = []
        for k, b in enumerate(net.g_bus):
            row = np.zeros(L.size)
            qk = L.q_gen.start + k
            if modes.gen[k] == "pv":
                F.append(s[b] - net.g_vref[k] ** 2)
                row[L.e.start + b] = 2 * e[b]
                row[L.f.start + b] = 2 * f[b]
            else:
                caps = net.g_caps[k]
                v = math.sqrt(s[b])
                p_mw = pg[k] * base
                if modes.gen[k] == "armature":
                    rem = (v * caps.I_N) ** 2 - p_mw**2
                    if rem <= 0:
                        raise PowerFlowError("generator active power exceeds armature rating")
                    q = math.sqrt(rem)
                    dq_dp = -p_mw / q
                    dq_dv = v * caps.I_N**2 / q
                else:
                    q, dq_dp, dq_dv = gencaps.field_limit_frozen(caps, p_mw, v, modes.gen_K[k])
                F.append(x[qk] - q / base)
                row[qk] = 1.0
                # dP/d(dL) = w, dP/dlam = w*sum_dp (lam is fixed, not free)
                row[L.dL] = -dq_dp * net.g_w[k]
                row[L.e.start + b] = -dq_dv / base * e[b] / v
                row[L.f.start + b] = -dq_dv / base * f[b] / v
            rows.append(row)
        for k, b in enumerate(net.i_bus):
            row = np.zeros(L.size)
            qk = L.q_ibg.start + k
            if modes.ibg[k] == "pv":
                F.append(s[b] - net.i_vset[k] ** 2)
                row[L.e.start + b] = 2 * e[b]
                row[L.f.start + b] = 2 * f[b]
            else:
                sign = 1.0 if modes.ibg[k] == "qmax" else -1.0
                p = x[L.p_ibg.start + k]
                rem = net.i_smax[k] ** 2 * s[b] - p * p
                if rem <= 0:
                    raise PowerFlowError("IBG active power exceeds converter rating")
                q = math.sqrt(rem)
                F.append(x[qk] - sign * q)
                row[qk] = 1.0
                row[L.e.start + b] = -sign * net.i_smax[k] ** 2 * e[b] / q
                row[L.f.start + b] = -sign * net.i_smax[k] ** 2 * f[b] / q
            rows.append(row)
        if rows:
            return np.asarray(F), np.vstack(rows)
        return np.zeros(0), np.zeros((0, L.size))

    def system(x):
        c, Jc = control(x)
        F = np.concatenate([net.residual(x), c])
        J = np.vstack([net.jacobian(x), Jc])[:, fi]
        return F, J

    x = x0.copy()
    F, J = system(x)
    nF = np.linalg.norm(F)
    for it in range(max_iter + 1):
        if np.max(np.abs(F)) <= tol:
            return x, it
        if it == max_iter:
            break
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            dx = np.linalg.lstsq(J, -F, rcond=None)[0]
        if not np.all(np.isfinite(dx)):
            break
        t = 1.0
        for _ in range(PF_MAX_HALVINGS + 1):
            xt = x.copy()
            xt[fi] += t * dx
            try:
                Ft, Jt = system(xt)
                nt = np.linalg.norm(Ft)
            except PowerFlowError:
                nt = math.inf
            if np.isfinite(nt) and nt < nF:
                break
            t *= 0.5
        if not np.isfinite(nt):
            break
        x, F, J, nF = xt, Ft, Jt, nt
    raise PowerFlowError(
        f"power flow did not converge (max mismatch {np.max(np.abs(F)):.3e})",
        last=net.layout.unpack(x),
    )


def solve_network(
    net: Network,
    start: OperatingPoint | None = None,
    *,
    lam: float = 0.0,
    dp_adn=None,
    dq_adn=None,
    p_ibg=None,
    enforce_q_limits: bool = True,
    tol: float = PF_TOL,
    max_iter: int = PF_MAX_ITER,
) -> OperatingPoint:
    """Newton power flow on a compiled network; see :func:`solve_powerflow`."""
    L = net.layout
    pt = start if start is not None else net.flat_start()
    x = L.pack(pt)
    x[L.lam] = lam
    if dp_adn is not None:
        x[L.dp_adn] = dp_adn
    if dq_adn is not None:
        x[L.dq_adn] = dq_adn
    if p_ibg is not None:
        x[L.p_ibg] = p_ibg
    modes = _Modes(
        gen=list(pt.info.get("gen_modes", ["pv"] * L.ng)),
        gen_K=list(pt.info.get("gen_K", [1.0] * L.ng)),
        ibg=list(pt.info.get("ibg_modes", ["pv"] * L.ni)),
    )
    if len(modes.gen) != L.ng or len(modes.ibg) != L.ni:
        modes = _Modes(["pv"] * L.ng, [1.0] * L.ng, ["pv"] * L.ni)
    base = net.base
    iters = 0
    for _ in range(30):
        x, it = _solve_fixed_modes(net, x, modes, tol, max_iter)
        iters += it
        if not enforce_q_limits:
            break
        changed = False
        e, f = x[L.e], x[L.f]
        vm = np.hypot(e, f)
        pg = net.gen_p(x)
        for k, b in enumerate(net.g_bus):
            caps = net.g_caps[k]
            if caps is None:
                continue
            q_mw = x[L.q_gen.start + k] * base
            p_mw = pg[k] * base
            if modes.gen[k] == "pv":
                try:
                    q_lim, kind = gencaps.reactive_limit(caps, p_mw, vm[b])
                except gencaps.CapabilityError as exc:
                    raise PowerFlowError(str(exc), last=L.unpack(x)) from exc
                if q_mw > q_lim + 1e-6:
                    modes.gen[k] = kind
                    modes.gen_K[k] = gencaps.field_limit(caps, p_mw, vm[b], q_lim, return_info=True)[1]
                    changed = True
            else:
                if vm[b] > net.g_vref[k] + 1e-9:
                    modes.gen[k] = "pv"
                    changed = True
                    continue
                q_a = gencaps.armature_limit(caps, p_mw, vm[b])
                q_r, K, _ = gencaps.field_limit(caps, p_mw, vm[b], q_mw, return_info=True)
                kind = "armature" if q_a <= q_r else "field"
                if kind != modes.gen[k] or (kind == "field" and abs(K - modes.gen_K[k]) > 1e-12):
                    modes.gen[k] = kind
                    modes.gen_K[k] = K
                    changed = True
        for k, b in enumerate(net.i_bus):
            q = x[L.q_ibg.start + k]
            p = x[L.p_ibg.start + k]
            qmax = math.sqrt(max(net.i_smax[k] ** 2 * vm[b] ** 2 - p * p, 0.0))
            if modes.ibg[k] == "pv":
                if q > qmax + 1e-9:
                    modes.ibg[k] = "qmax"
                    changed = True
                elif q < -qmax - 1e-9:
                    modes.ibg[k] = "qmin"
                    changed = True
            elif modes.ibg[k] == "qmax" and vm[b] > net.i_vset[k] + 1e-12:
                modes.ibg[k] = "pv"
                changed = True
            elif modes.ibg[k] == "qmin" and vm[b] < net.i_vset[k] - 1e-12:
                modes.ibg[k] = "pv"
                changed = True
        if not changed:
            break
    else:
        raise PowerFlowError("reactive limit switching did not settle", last=L.unpack(x))
    info = {
        "gen_modes": list(modes.gen),
        "gen_K": list(modes.gen_K),
        "ibg_modes": list(modes.ibg),
        "iterations": iters,
        "limited": dict(net.limited),
    }
    return L.unpack(x, info)


def solve_powerflow(
    case: NetworkCase | Network,
    start: OperatingPoint | None = None,
    fixed: dict | None = None,
    *,
    enforce_p_limits: bool = True,
    **kw,
) -> OperatingPoint:
    """Solve the balance equations for ``(e, f, q, dL)``.

    ``fixed`` may hold ``lam`` and ADN adjustments ``adn`` as
    ``{adn_id: (dP_MW, dQ_MVar)}``.  Voltage-controlled units regulate their
    setpoint until a reactive limit binds.  Generators driven outside their
    active power range are frozen at the bound and removed from the slack.
    """
    net = case if isinstance(case, Network) else Network(case)
    fixed = dict(fixed or {})
    lam = float(fixed.get("lam", 0.0))
    dp = dq = None
    if "adn" in fixed:
        adj = fixed["adn"]
        dp = np.array([adj.get(a, (0.0, 0.0))[0] for a in net.a_ids]) / net.base
        dq = np.array([adj.get(a, (0.0, 0.0))[1] for a in net.a_ids]) / net.base
    limited = dict(net.limited)
    for _ in range(len(net.gens) + 1):
        pt = solve_network(net, start, lam=lam, dp_adn=dp, dq_adn=dq, **kw)
        if not enforce_p_limits:
            return pt
        x = net.layout.pack(pt)
        pg = net.gen_p(x) * net.base
        new = {}
        for k, g in enumerate(net.gens):
            if g.id in limited:
                continue
            if g.P_max is not None and pg[k] > g.P_max + 1e-9:
                new[g.id] = g.P_max
            elif g.P_min is not None and pg[k] < g.P_min - 1e-9:
                new[g.id] = g.P_min
        if not new:
            return pt
        limited.update(new)
        net = net.with_limited(limited)
        start = pt
    raise PowerFlowError("active power limit enforcement did not settle")


# ----------------------------------------------------------------------
# continuation


@dataclass
class PvCurve:
    lam: np.ndarray
    dP_MW: np.ndarray
    vm: np.ndarray  # bus voltages per step, shape (steps, n)
    nose: OperatingPoint
    bus_ids: list[str]

    @property
    def lam_max(self) -> float:
        return float(self.lam[-1])

    @property
    def margin_MW(self) -> float:
        return float(self.dP_MW[-1])

    def to_csv(self, bus: str | None = None) -> str:
        cols = self.bus_ids if bus is None else [bus]
        j = [self.bus_ids.index(c) for c in cols]
        lines = ["lam,dP_MW," + ",".join(f"V_{c}" for c in cols)]
        for i in range(len(self.lam)):
            vals = ",".join(f"{self.vm[i, k]:.10g}" for k in j)
            lines.append(f"{self.lam[i]:.10g},{self.dP_MW[i]:.10g},{vals}")
        return "\n".join(lines) + "\n"


def pv_curve(
    case: NetworkCase,
    step_MW: float = 10.0,
    *,
    adjustments: dict[str, tuple[float, float]] | None = None,
    start: OperatingPoint | None = None,
    min_step_MW: float = 1e-4,
    max_points: int = 100000,
) -> PvCurve:
    """Trace the PV curve along the case stress direction up to the nose.

    The stress level grows by ``step_MW`` of total load; after a failed power
    flow the step is halved until it drops below ``min_step_MW``.  The last
    converged point approximates the loadability limit.
    """
    net = Network(case)
    if net.sum_dp <= 0:
        raise CaseError("stress direction has no active power component")
    fixed = {"lam": 0.0, "adn": adjustments or {}}
    pt = solve_powerflow(net, start, fixed)
    lams, vms = [0.0], [pt.vm]
    lam = 0.0
    dlam = step_MW / (net.sum_dp * net.base)
    dmin = min_step_MW / (net.sum_dp * net.base)
    while dlam >= dmin and len(lams) < max_points:
        try:
            nxt = solve_powerflow(net, pt, dict(fixed, lam=lam + dlam))
        except PowerFlowError:
            dlam *= 0.5
            continue
        lam += dlam
        pt = nxt
        if len(pt.info.get("limited", {})) > len(net.limited):
            # keep frozen machines frozen so later steps do not retry the slack
            net = net.with_limited(pt.info["limited"])
        lams.append(lam)
        vms.append(pt.vm)
    lam_arr = np.asarray(lams)
    return PvCurve(
        lam_arr, lam_arr * net.sum_dp * net.base, np.vstack(vms), pt, [b.id for b in case.buses]
    )
