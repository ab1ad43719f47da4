"""Voltage stability margin as a maximum-loadability OPF.

The margin is the largest stress level ``lam`` for which the balance
equations still have a solution that respects generator reactive limits.
Each machine with capability data either regulates its terminal voltage or
sits on its stator or field current limit; both options are written as
inequalities (``V <= V_ref`` and ``Q <= limit``) and the complementarity
between them is checked after the solve.

Two outer loops wrap the NLP: the saturation factor of every field limit is
frozen per pass and refreshed from the solution, and machines found beyond
their active power range are frozen at the bound and removed from the
distributed slack.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import gencaps
from .netmodel import CaseError, InfeasibleCaseError, NetworkCase, StressDirection, is_connected
from .nlp import NlpOptions, NlpSolution, solve_nlp
from .opf import (
    OpfModel, balance_block, circle_block, field_block, fix_block, linear_block,
    linear_objective, vsq_block,
)
from .powerflow import (
    Network, OperatingPoint, PowerFlowError, pv_curve, solve_network, solve_powerflow,
)

log = logging.getLogger(__name__)

MAX_OUTER = 10
K_TOL = 1e-9
BIFURCATION_PROBE = 1e-3


class VsmError(RuntimeError):
    pass


class IslandingError(CaseError):
    pass


class VsmInfeasibleError(VsmError, InfeasibleCaseError):
    pass


@dataclass(frozen=True)
class VsmProblemSpec:
    """One margin computation.

    ``direction`` overrides the stress stored in the case; ``contingency``
    names a branch taken out of service before the base power flow.
    """

    case: NetworkCase
    direction: StressDirection | None = None
    contingency: str | None = None
    adn_mode: str = "frozen"

    def __post_init__(self):
        if self.adn_mode not in ("frozen", "flexible"):
            raise ValueError(f"adn_mode must be 'frozen' or 'flexible', got {self.adn_mode!r}")


@dataclass
class VsmSolution:
    lam_star: float
    vsm_MW: float
    point: OperatingPoint
    gen_report: dict[str, str]
    adn_adjustments: dict[str, tuple[float, float]]
    binding_fr_constraints: dict[str, list[int]]
    base_MVA: float
    limited: dict[str, float] = field(default_factory=dict)
    complementarity: dict[str, float] = field(default_factory=dict)
    probe: str = "not-run"
    outer_iterations: int = 0
    nlp: NlpSolution | None = None

    @property
    def vsm_pu(self) -> float:
        return self.vsm_MW / self.base_MVA

    @property
    def certified(self) -> bool:
        return self.probe in ("no-solution", "limit-violation")

    def to_dict(self) -> dict:
        return {
            "lam_star": self.lam_star,
            "vsm_MW": self.vsm_MW,
            "gen_report": dict(self.gen_report),
            "adn_adjustments": {k: list(v) for k, v in self.adn_adjustments.items()},
            "binding_fr_constraints": {k: list(v) for k, v in self.binding_fr_constraints.items()},
            "limited": dict(self.limited),
            "complementarity": dict(self.complementarity),
            "probe": self.probe,
            "outer_iterations": self.outer_iterations,
            "V": {b: float(v) for b, v in zip(self.point.info.get("bus_ids", []), self.point.vm)},
        }


def apply_contingency(case: NetworkCase, branch: str) -> NetworkCase:
    """Copy of ``case`` with ``branch`` out of service; refuses to island."""
    if not any(br.id == branch for br in case.branches):
        raise CaseError(f"unknown branch {branch!r}")
    branches = tuple(
        replace(br, in_service=False) if br.id == branch else br for br in case.branches
    )
    out = case.replace(branches=branches, name=f"{case.name} -{branch}")
    if not is_connected(out):
        raise IslandingError(f"removing branch {branch!r} islands the network")
    return out


def _prepare(spec: VsmProblemSpec) -> NetworkCase:
    case = spec.case
    if spec.direction is not None:
        case = case.replace(stress=spec.direction)
    if case.stress is None or not any(v != 0 for v in case.stress.d_p.values()):
        raise VsmError("stress direction has no active power component: objective degenerate")
    if case.stress.total_p <= 0:
        raise VsmError("stress direction must increase total active load")
    if spec.contingency is not None:
        case = apply_contingency(case, spec.contingency)
    if spec.adn_mode == "flexible":
        for a in case.adns:
            if a.polygon is None:
                raise VsmError(f"ADN {a.id} has no flexibility polygon")
            if not a.polygon.is_degenerate and not a.polygon.origin_interior():
                raise VsmInfeasibleError(f"ADN {a.id}: polygon does not contain the operating point")
    return case


def _build(net: Network, K: list[float], flexible: bool, adns) -> OpfModel:
    L = net.layout
    size = L.size
    base = net.base
    m = OpfModel(net)
    m.eq.append(balance_block(net))
    if L.ni:
        m.eq.append(fix_block(size, range(L.p_ibg.start, L.p_ibg.stop), net.i_p0,
                              [f"P_ibg[{i}]" for i in net.i_ids]))

    fixed_v, fixed_ref, fixed_lab = [], [], []
    for k, g in enumerate(net.gens):
        b = int(net.g_bus[k])
        if g.caps is None:
            fixed_v.append(b)
            fixed_ref.append(g.V_ref)
            fixed_lab.append(f"V[{g.id}]")
            continue
        m.ineq.append(vsq_block(net, [b], -1.0, [g.V_ref**2], [f"Vref[{g.id}]"]))
        u = np.zeros(size)
        u[L.dL] = net.g_w[k]
        u[L.lam] = net.g_w[k] * net.sum_dp
        v = np.zeros(size)
        v[L.q_gen.start + k] = 1.0
        m.ineq.append(circle_block(net, b, (g.caps.I_N / base) ** 2, u, net.g_p0[k], v, 0.0,
                                   f"armature[{g.id}]"))
        m.ineq.append(field_block(net, k, K[k], f"field[{g.id}]"))
    if fixed_v:
        m.eq.append(vsq_block(net, fixed_v, 1.0, [-r * r for r in fixed_ref], fixed_lab))

    for k, u_ in enumerate(net.ibgs):
        b = int(net.i_bus[k])
        m.ineq.append(vsq_block(net, [b], -1.0, [u_.V_set**2], [f"Vset[{u_.id}]"]))
        u = np.zeros(size)
        u[L.p_ibg.start + k] = 1.0
        v = np.zeros(size)
        v[L.q_ibg.start + k] = 1.0
        m.ineq.append(circle_block(net, b, net.i_smax[k] ** 2, u, 0.0, v, 0.0,
                                   f"converter[{u_.id}]"))

    for j, a in enumerate(adns):
        ip, iq = L.dp_adn.start + j, L.dq_adn.start + j
        poly = a.polygon if flexible else None
        if poly is None or poly.is_degenerate:
            m.eq.append(fix_block(size, [ip, iq], [0.0, 0.0], [f"dP[{a.id}]", f"dQ[{a.id}]"]))
            continue
        al, be = poly.coefficient_arrays()
        A = np.zeros((len(al), size))
        A[:, ip] = al * base
        A[:, iq] = be * base
        m.ineq.append(linear_block(A, np.ones(len(al)), [f"fr[{a.id}][{i}]" for i in range(len(al))]))
    return m


def _machine_state(net: Network, x: np.ndarray, k: int):
    L = net.layout
    b = int(net.g_bus[k])
    v = math.hypot(x[L.e][b], x[L.f][b])
    p = float(net.gen_p(x)[k] * net.base)
    q = float(x[L.q_gen.start + k] * net.base)
    return v, p, q


def _refresh_K(net: Network, x: np.ndarray, K: list[float]) -> list[float]:
    out = list(K)
    for k, g in enumerate(net.gens):
        if g.caps is None:
            continue
        v, p, q = _machine_state(net, x, k)
        out[k] = gencaps.saturation_factor(g.caps, gencaps.airgap_voltage(g.caps, p, q, v))
    return out


def _gen_report(net: Network, x: np.ndarray, K: list[float], tol: float = 1e-6):
    report, comp, modes = {}, {}, []
    for k, g in enumerate(net.gens):
        if g.caps is None:
            report[g.id] = "P-limited" if g.id in net.limited else "voltage-controlled"
            modes.append("pv")
            continue
        v, p, q = _machine_state(net, x, k)
        q_a = math.sqrt(max((v * g.caps.I_N) ** 2 - p * p, 0.0))
        q_r = gencaps.field_limit_frozen(g.caps, p, v, K[k])[0]
        q_lim = min(q_a, q_r)
        comp[g.id] = (g.V_ref - v) * (q_lim - q) / net.base
        if g.id in net.limited:
            state = "P-limited"
        elif v >= g.V_ref - tol:
            state = "voltage-controlled"
        else:
            state = "armature-limited" if q_a <= q_r else "field-limited"
        report[g.id] = state
        if v >= g.V_ref - tol:
            modes.append("pv")
        else:
            modes.append("armature" if q_a <= q_r else "field")
    return report, comp, modes


def _p_violations(net: Network, x: np.ndarray, tol: float = 1e-6) -> dict[str, float]:
    pg = net.gen_p(x) * net.base
    out = {}
    for k, g in enumerate(net.gens):
        if g.id in net.limited:
            continue
        if g.P_max is not None and pg[k] > g.P_max + tol:
            out[g.id] = g.P_max
        elif g.P_min is not None and pg[k] < g.P_min - tol:
            out[g.id] = g.P_min
    return out


def _probe(net: Network, pt: OperatingPoint, lam: float, adj: dict) -> str:
    """Power flow slightly beyond the optimum: it should have no valid solution."""
    try:
        nxt = solve_powerflow(
            net, pt, {"lam": lam * (1.0 + BIFURCATION_PROBE) if lam else BIFURCATION_PROBE,
                      "adn": adj},
            enforce_p_limits=False,
        )
    except PowerFlowError:
        return "no-solution"
    x = net.layout.pack(nxt)
    if _p_violations(net, x):
        return "limit-violation"
    return "feasible"


def _solve(spec: VsmProblemSpec, opts: NlpOptions | None, probe: bool) -> VsmSolution:
    case = _prepare(spec)
    flexible = spec.adn_mode == "flexible"
    net = Network(case)
    try:
        base_pt = solve_powerflow(net, None, {"lam": 0.0})
    except PowerFlowError as exc:
        raise VsmInfeasibleError(f"base case power flow does not solve: {exc}") from exc
    limited = dict(base_pt.info.get("limited", {}))
    net = Network(case, limited) if limited else net
    K = list(base_pt.info.get("gen_K", [1.0] * len(net.gens)))
    x0 = net.layout.pack(base_pt)
    seen = [frozenset(limited)]
    sol = None
    for outer in range(1, MAX_OUTER + 1):
        model = _build(net, K, flexible, case.adns)
        c = np.zeros(net.layout.size)
        c[net.layout.lam] = -net.sum_dp
        sol = solve_nlp(model.problem(*linear_objective(c)), x0, opts)
        if not sol.ok:
            raise VsmError(f"VSM optimisation failed ({sol.status}): {sol.diagnostic}")
        x = sol.x
        viol = _p_violations(net, x)
        K_new = _refresh_K(net, x, K)
        k_changed = any(abs(a - b) > K_TOL for a, b in zip(K, K_new))
        if not viol and not k_changed:
            break
        K = K_new
        if viol:
            limited = {**limited, **viol}
            key = frozenset(limited)
            if key in seen:
                raise VsmError(f"limited-generator set cycles: {sorted(key)}")
            seen.append(key)
            net = Network(case, limited)
        x0 = x
    else:
        raise VsmError(f"outer loop did not settle in {MAX_OUTER} iterations "
                       f"(limited={sorted(limited)})")

    L = net.layout
    report, comp, modes = _gen_report(net, x, K)
    info = {
        "gen_modes": modes, "gen_K": K, "ibg_modes": ["pv"] * L.ni,
        "limited": dict(limited), "bus_ids": [b.id for b in case.buses],
    }
    pt = L.unpack(x, info)
    adj = {a.id: (float(x[L.dp_adn.start + j] * net.base), float(x[L.dq_adn.start + j] * net.base))
           for j, a in enumerate(case.adns)}
    binding = {}
    for a in case.adns:
        tag = f"fr[{a.id}]["
        binding[a.id] = [
            int(lab[len(tag):-1]) for lab in sol.active_labels if lab.startswith(tag)
        ]
    lam = float(x[L.lam])
    out = VsmSolution(
        lam_star=lam,
        vsm_MW=lam * net.sum_dp * net.base,
        point=pt,
        gen_report=report,
        adn_adjustments=adj,
        binding_fr_constraints=binding,
        base_MVA=net.base,
        limited=dict(limited),
        complementarity=comp,
        outer_iterations=outer,
        nlp=sol,
    )
    if probe:
        out.probe = _probe(net, pt, lam, adj)
    return out


def solve_vsm(spec: VsmProblemSpec, opts: NlpOptions | None = None, *, probe: bool = True) -> VsmSolution:
    """Maximum stress along the direction with ADN exchanges held constant.

    A spec in flexible mode is solved with the polygons as well; use
    :func:`solve_vsm_flex` to make the intent explicit.
    """
    return _solve(spec, opts, probe)


def solve_vsm_flex(spec: VsmProblemSpec, opts: NlpOptions | None = None, *, probe: bool = True) -> VsmSolution:
    """Maximum stress with every ADN free to move inside its polygon."""
    if spec.adn_mode != "flexible":
        spec = replace(spec, adn_mode="flexible")
    return _solve(spec, opts, probe)


def continuation_margin(
    spec: VsmProblemSpec,
    adjustments: dict[str, tuple[float, float]] | None = None,
    step_MW: float = 5.0,
    min_step_MW: float = 1e-3,
) -> float:
    """Margin in MW from a stepped PV-curve ramp (independent of the NLP)."""
    case = _prepare(replace(spec, adn_mode="frozen"))
    return pv_curve(case, step_MW, adjustments=adjustments, min_step_MW=min_step_MW).margin_MW
