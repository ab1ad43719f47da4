"""Feeder OPF shared by the flexibility scan and setpoint tracking.

The decision variables are the full feeder state.  The LTC is not modelled
explicitly: its tap stays at the case value and the magnitude of the grid
source is left free, which is equivalent to a free regulated MV voltage.
The PCC exchange is the output of that source, so ``P_j`` and ``Q_j`` are
linear in the state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netmodel import InfeasibleCaseError, NetworkCase
from .nlp import NlpOptions, NlpSolution, solve_nlp
from .opf import Block, OpfModel, balance_block, circle_block, fix_block, linear_block, vsq_block
from .powerflow import Network, OperatingPoint, PowerFlowError, solve_powerflow


class FeederError(RuntimeError):
    pass


class FeederInfeasibleError(FeederError, InfeasibleCaseError):
    pass


@dataclass
class FeederSetpoints:
    """Local controls realising a PCC exchange."""

    V_d: dict[str, float]
    tap: dict[str, float]
    ibg_V: dict[str, float]
    ibg_P: dict[str, float]
    ibg_Q: dict[str, float]

    def to_dict(self) -> dict:
        return {"V_d": self.V_d, "tap": self.tap, "ibg_V": self.ibg_V,
                "ibg_P": self.ibg_P, "ibg_Q": self.ibg_Q}


class FeederOpf:
    """Constraint set of a feeder around its base operating point."""

    def __init__(self, feeder: NetworkCase):
        if feeder.scope != "feeder":
            raise FeederError(f"case {feeder.name!r} is not a feeder")
        self.case = feeder
        net = self.net = Network(feeder)
        try:
            self.base_pt = solve_powerflow(net, None, {"lam": 0.0})
        except PowerFlowError as exc:
            raise FeederInfeasibleError(f"feeder base power flow does not solve: {exc}") from exc
        L = net.layout
        self.x0 = L.pack(self.base_pt)
        slack = net.slack
        grid = [k for k, b in enumerate(net.g_bus) if b == slack]
        if len(grid) != 1:
            raise FeederError("feeder needs exactly one source at its slack bus")
        k = self.k_grid = grid[0]
        self.gp = np.zeros(L.size)
        self.gp[L.dL] = net.g_w[k]
        self.gp[L.lam] = net.g_w[k] * net.sum_dp
        self.gp0 = net.g_p0[k]
        self.gq = np.zeros(L.size)
        self.gq[L.q_gen.start + k] = 1.0
        self.P0 = float(self.gp @ self.x0 + self.gp0) * net.base
        self.Q0 = float(self.gq @ self.x0) * net.base
        self.model = self._build()

    def _build(self) -> OpfModel:
        net, L = self.net, self.net.layout
        size, case = L.size, self.case
        m = OpfModel(net)
        m.eq.append(balance_block(net))
        m.eq.append(fix_block(size, [L.lam], [0.0], ["lam"]))
        inner = [i for i in range(net.n) if i != net.slack]
        ids = [case.buses[i].id for i in inner]
        m.ineq.append(vsq_block(net, inner, 1.0, [-case.buses[i].V_min ** 2 for i in inner],
                                [f"V_min[{b}]" for b in ids]))
        m.ineq.append(vsq_block(net, inner, -1.0, [case.buses[i].V_max ** 2 for i in inner],
                                [f"V_max[{b}]" for b in ids]))
        fixed_p, fixed_v = [], []
        for k, u in enumerate(net.ibgs):
            ip = L.p_ibg.start + k
            if u.dispatchable:
                lo, hi = u.p_range
                A = np.zeros((2, size))
                A[0, ip] = 1.0
                A[1, ip] = -1.0
                m.ineq.append(linear_block(A, [-lo / net.base, hi / net.base],
                                           [f"P_min[{u.id}]", f"P_max[{u.id}]"]))
            else:
                fixed_p.append(k)
            uu = np.zeros(size)
            uu[ip] = 1.0
            vv = np.zeros(size)
            vv[L.q_ibg.start + k] = 1.0
            m.ineq.append(circle_block(net, int(net.i_bus[k]), net.i_smax[k] ** 2, uu, 0.0, vv, 0.0,
                                       f"I_max[{u.id}]"))
        if fixed_p:
            m.eq.append(fix_block(size, [L.p_ibg.start + k for k in fixed_p],
                                  [net.i_p0[k] for k in fixed_p],
                                  [f"P_g[{net.i_ids[k]}]" for k in fixed_p]))
        for k, g in enumerate(net.gens):
            if k != self.k_grid:
                fixed_v.append(k)
        if fixed_v:
            bs = [int(net.g_bus[k]) for k in fixed_v]
            m.eq.append(vsq_block(net, bs, 1.0, [-net.g_vref[k] ** 2 for k in fixed_v],
                                  [f"V[{net.g_ids[k]}]" for k in fixed_v]))
        return m

    # ------------------------------------------------------------------
    def exchange(self, x: np.ndarray) -> tuple[float, float]:
        """(P_j, Q_j) in MW / Mvar."""
        b = self.net.base
        return float(self.gp @ x + self.gp0) * b, float(self.gq @ x) * b

    def deviation(self, x: np.ndarray) -> tuple[float, float]:
        p, q = self.exchange(x)
        return p - self.P0, q - self.Q0

    def deviation_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of (dP, dQ) in pu with respect to the state."""
        return self.gp, self.gq

    def setpoints(self, x: np.ndarray) -> FeederSetpoints:
        net, L = self.net, self.net.layout
        vm = np.hypot(x[L.e], x[L.f])
        V_d, tap = {}, {}
        for t in self.case.transformers:
            if not t.in_service:
                continue
            iv, ih = net.idx[t.mv_bus], net.idx[t.hv_bus]
            V_d[t.mv_bus] = float(vm[iv])
            # same MV voltage with the PCC held at its base magnitude
            tap[t.id] = float(t.tap * self.base_pt.vm[ih] / vm[ih])
        return FeederSetpoints(
            V_d=V_d,
            tap=tap,
            ibg_V={u.id: float(vm[net.i_bus[k]]) for k, u in enumerate(net.ibgs)},
            ibg_P={u.id: float(x[L.p_ibg.start + k] * net.base) for k, u in enumerate(net.ibgs)},
            ibg_Q={u.id: float(x[L.q_ibg.start + k] * net.base) for k, u in enumerate(net.ibgs)},
        )

    def control_indices(self) -> np.ndarray:
        """State entries that a local controller sets (MV and IBG voltages, IBG P)."""
        net, L = self.net, self.net.layout
        buses = {net.idx[t.mv_bus] for t in self.case.transformers if t.in_service}
        buses |= {int(b) for b in net.i_bus}
        idx = [L.e.start + b for b in sorted(buses)] + [L.f.start + b for b in sorted(buses)]
        idx += [L.p_ibg.start + k for k, u in enumerate(net.ibgs) if u.dispatchable]
        return np.asarray(idx, dtype=int)

    def solve(self, objective, objective_hess=None, extra_eq: list[Block] = (),
              opts: NlpOptions | None = None, x0: np.ndarray | None = None) -> NlpSolution:
        m = OpfModel(self.net, eq=self.model.eq + list(extra_eq), ineq=list(self.model.ineq))
        prob = m.problem(objective, objective_hess)
        return solve_nlp(prob, self.x0 if x0 is None else x0, opts)

    def point(self, x: np.ndarray) -> OperatingPoint:
        return self.net.layout.unpack(x)
