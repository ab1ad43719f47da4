"""Driving a feeder to a commanded PCC exchange.

Three pieces live here: the tracking OPF that finds local setpoints closest
to a PCC reference, a quasi-steady-state simulator that applies those
setpoints through LTC tap steps and slow IBG voltage ramps, and the
closed-form estimate of load relief from voltage reduction.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .feeder_opf import FeederError, FeederOpf, FeederSetpoints
from .netmodel import CaseError, InfeasibleCaseError, NetworkCase
from .nlp import NlpOptions
from .powerflow import Network, OperatingPoint, PowerFlowError, solve_powerflow

REGULARISATION = 1e-8  # keeps controls at their base values when the objective is flat
RAMP_RATE = 0.0005  # pu/s
DT = 1.0  # s


class ControlError(RuntimeError):
    pass


class ControlInfeasibleError(ControlError, InfeasibleCaseError):
    pass


# ----------------------------------------------------------------------
# setpoint tracking


@dataclass(frozen=True)
class SetpointCommand:
    """Target PCC consumption in MW / Mvar."""

    P_ref: float
    Q_ref: float

    @classmethod
    def from_adjustment(cls, P_j0: float, Q_j0: float, dP: float, dQ: float) -> "SetpointCommand":
        return cls(P_j0 + dP, Q_j0 + dQ)


@dataclass
class TrackingResult:
    command: SetpointCommand
    achieved: tuple[float, float]  # (P_j, Q_j)
    distance: float  # MVA
    point: OperatingPoint
    setpoints: FeederSetpoints
    anchor: tuple[float, float]
    binding: list[str] = field(default_factory=list)

    @property
    def adjustment(self) -> tuple[float, float]:
        return self.achieved[0] - self.anchor[0], self.achieved[1] - self.anchor[1]

    def to_dict(self) -> dict:
        return {
            "P_ref": self.command.P_ref,
            "Q_ref": self.command.Q_ref,
            "P_j": self.achieved[0],
            "Q_j": self.achieved[1],
            "P_j0": self.anchor[0],
            "Q_j0": self.anchor[1],
            "distance_MVA": self.distance,
            "binding": list(self.binding),
            "setpoints": self.setpoints.to_dict(),
        }


def track_setpoint(
    feeder: NetworkCase | FeederOpf,
    cmd: SetpointCommand,
    opts: NlpOptions | None = None,
) -> TrackingResult:
    """Feeder state whose PCC exchange is closest to ``cmd``.

    Minimises the squared Euclidean distance in per unit over the same
    constraint set as the flexibility scan.  A tiny quadratic pull towards
    the base controls makes the solution unique when the target is reachable
    in more than one way.

    Raises:
        FeederError: the NLP did not converge.
    """
    fo = feeder if isinstance(feeder, FeederOpf) else FeederOpf(feeder)
    base = fo.net.base
    gp, gq = fo.deviation_rows()
    rp = fo.gp0 - cmd.P_ref / base
    rq = -cmd.Q_ref / base
    ctl = fo.control_indices()
    x0 = fo.x0
    H = 2.0 * (np.outer(gp, gp) + np.outer(gq, gq))
    H[ctl, ctl] += 2.0 * REGULARISATION

    def objective(x):
        ep = gp @ x + rp
        eq = gq @ x + rq
        dc = x[ctl] - x0[ctl]
        g = 2.0 * (ep * gp + eq * gq)
        g[ctl] += 2.0 * REGULARISATION * dc
        return float(ep * ep + eq * eq + REGULARISATION * dc @ dc), g

    sol = fo.solve(objective, lambda x: H, (), opts)
    if not sol.ok:
        raise FeederError(f"tracking OPF failed: {sol.diagnostic or sol.status}")
    P, Q = fo.exchange(sol.x)
    return TrackingResult(
        command=cmd,
        achieved=(P, Q),
        distance=math.hypot(P - cmd.P_ref, Q - cmd.Q_ref),
        point=fo.point(sol.x),
        setpoints=fo.setpoints(sol.x),
        anchor=(fo.P0, fo.Q0),
        binding=list(sol.active_labels),
    )


# ----------------------------------------------------------------------
# quasi-steady-state simulation


@dataclass(frozen=True)
class LtcCommand:
    V_set: float
    deadband_half: float


@dataclass(frozen=True)
class ControlSchedule:
    """Setpoint changes applied to one feeder.

    The LTC commands take effect at t = 0.  IBG voltage ramps start after the
    first tap step, or at t = 0 when no LTC is commanded or none has to move.
    """

    ltc: dict[str, LtcCommand] = field(default_factory=dict)
    ramps: dict[str, float] = field(default_factory=dict)  # IBG id -> target V (pu)
    ramp_rate: float = RAMP_RATE

    def __post_init__(self):
        if self.ramp_rate <= 0:
            raise ValueError("ramp rate must be positive")
        for c in self.ltc.values():
            if c.deadband_half <= 0:
                raise ValueError("deadband half-width must be positive")

    @classmethod
    def from_setpoints(cls, sp: FeederSetpoints, feeder: NetworkCase,
                       ramp_rate: float = RAMP_RATE) -> "ControlSchedule":
        """Schedule realising tracking-OPF setpoints (deadbands kept)."""
        ltc = {}
        for t in feeder.transformers:
            if t.in_service and t.mv_bus in sp.V_d:
                ltc[t.id] = LtcCommand(sp.V_d[t.mv_bus], t.deadband_half)
        return cls(ltc=ltc, ramps=dict(sp.ibg_V), ramp_rate=ramp_rate)

    def validate(self, feeder: NetworkCase) -> None:
        trs = {t.id: t for t in feeder.transformers}
        ibgs = {u.id: u for u in feeder.ibgs}
        for tid, c in self.ltc.items():
            if tid not in trs:
                raise CaseError(f"schedule: unknown transformer {tid!r}")
            b = feeder.bus(trs[tid].mv_bus)
            if not b.V_min - 1e-9 <= c.V_set <= b.V_max + 1e-9:
                raise CaseError(f"schedule: LTC {tid!r} setpoint {c.V_set} outside bus limits")
        for uid, v in self.ramps.items():
            if uid not in ibgs:
                raise CaseError(f"schedule: unknown IBG {uid!r}")
            b = feeder.bus(ibgs[uid].bus)
            if not b.V_min - 1e-9 <= v <= b.V_max + 1e-9:
                raise CaseError(f"schedule: ramp target of {uid!r} outside bus limits")

    def to_dict(self) -> dict:
        return {
            "ltc": {k: {"V_set": c.V_set, "deadband_half": c.deadband_half} for k, c in self.ltc.items()},
            "ramps": dict(self.ramps),
            "ramp_rate": self.ramp_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ControlSchedule":
        unknown = set(d) - {"ltc", "ramps", "ramp_rate"}
        if unknown:
            raise CaseError(f"schedule: unknown keys {sorted(unknown)}")
        try:
            ltc = {k: LtcCommand(float(v["V_set"]), float(v["deadband_half"]))
                   for k, v in d.get("ltc", {}).items()}
            ramps = {k: float(v) for k, v in d.get("ramps", {}).items()}
        except (KeyError, TypeError, ValueError) as exc:
            raise CaseError(f"schedule: malformed entry ({exc})") from exc
        return cls(ltc, ramps, float(d.get("ramp_rate", RAMP_RATE)))


def load_schedule(path: str | Path) -> ControlSchedule:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CaseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return ControlSchedule.from_dict(doc)


@dataclass
class QssSample:
    t: float
    taps: dict[str, float]
    V: dict[str, float]  # bus magnitudes
    ibg: dict[str, tuple[float, float, float]]  # id -> (V_g, P_g, Q_g)
    loads: dict[str, tuple[float, float]]  # id -> (P, Q) in MW / Mvar
    P_j: float
    Q_j: float
    mismatch: float  # max balance residual, pu


@dataclass
class QssTrace:
    feeder: str
    samples: list[QssSample]
    status: str  # quiescent | horizon | diverged
    ramp_seconds: float = 0.0
    tap_exhausted: list[str] = field(default_factory=list)
    diagnostic: str = ""
    ltc_buses: dict[str, str] = field(default_factory=dict)

    @property
    def first(self) -> QssSample:
        return self.samples[0]

    @property
    def last(self) -> QssSample:
        return self.samples[-1]

    @property
    def dP_j(self) -> float:
        return self.last.P_j - self.first.P_j

    def load_change(self, load_id: str) -> float:
        return self.last.loads[load_id][0] - self.first.loads[load_id][0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        trs = sorted(self.first.taps)
        ibgs = sorted(self.first.ibg)
        head = ["t_s"]
        for t in trs:
            head += [f"tap[{t}]", f"V_d[{t}]"] if len(trs) > 1 else ["tap", "V_d"]
        for u in ibgs:
            head += [f"V_g[{u}]", f"P_g[{u}]", f"Q_g[{u}]"]
        w.writerow(head + ["P_j", "Q_j"])
        for s in self.samples:
            row = [f"{s.t:g}"]
            for t in trs:
                row += [f"{s.taps[t]:.6f}", f"{s.V[self.ltc_buses[t]]:.10g}"]
            for u in ibgs:
                row += [f"{v:.10g}" for v in s.ibg[u]]
            w.writerow(row + [f"{s.P_j:.10g}", f"{s.Q_j:.10g}"])
        return buf.getvalue()


def _sample(t: float, case: NetworkCase, net: Network, pt: OperatingPoint, k_grid: int) -> QssSample:
    L = net.layout
    x = L.pack(pt)
    vm = pt.vm
    base = net.base
    lp, lq = net.load_pq(x)
    return QssSample(
        t=t,
        taps={tr.id: tr.tap for tr in case.transformers if tr.in_service},
        V={b.id: float(vm[i]) for i, b in enumerate(case.buses)},
        ibg={u.id: (float(vm[net.i_bus[k]]), float(pt.p_ibg[k] * base), float(pt.q_ibg[k] * base))
             for k, u in enumerate(net.ibgs)},
        loads={ld: (float(lp[k] * base), float(lq[k] * base)) for k, ld in enumerate(net.ld_ids)},
        P_j=float(net.gen_p(x)[k_grid] * base),
        Q_j=float(pt.q_gen[k_grid] * base),
        mismatch=float(np.max(np.abs(net.residual(x)))),
    )


def qss_simulate(
    feeder: NetworkCase,
    sched: ControlSchedule,
    horizon_s: float = 600.0,
    dt: float = DT,
) -> QssTrace:
    """Sequence of feeder equilibria driven by tap steps and voltage ramps.

    Each transformer counts the time its MV voltage spends outside the
    commanded deadband; the first step needs ``delay_s`` and later steps
    ``delay_next_s``.  IBG ramps move the voltage setpoint by
    ``ramp_rate * dt`` per step.  The power flow switches a unit to
    constant reactive output when its current limit binds.
    """
    sched.validate(feeder)
    case = feeder
    for tid, c in sched.ltc.items():
        case = case.with_transformer(tid, V_set=c.V_set, deadband_half=c.deadband_half)
    trs = [t for t in case.transformers if t.in_service]
    ltc_bus = {t.id: t.mv_bus for t in trs}
    net = Network(case)
    slack = net.slack
    k_grid = next(k for k, b in enumerate(net.g_bus) if b == slack)
    try:
        pt = solve_powerflow(net, None, {"lam": 0.0})
    except PowerFlowError as exc:
        raise ControlInfeasibleError(f"initial power flow failed: {exc}") from exc
    samples = [_sample(0.0, case, net, pt, k_grid)]

    vset = {u.id: u.V_set for u in case.ibgs}
    targets = dict(sched.ramps)
    ramp_steps = {}
    for uid, v in targets.items():
        n = math.ceil(abs(v - vset[uid]) / (sched.ramp_rate * dt) - 1e-9)
        ramp_steps[uid] = max(n, 0)
    timer = {t.id: 0.0 for t in trs}
    stepped = {t.id: 0 for t in trs}
    exhausted: set[str] = set()

    def outside(tr, vm_d):
        return abs(vm_d - tr.V_set) > tr.deadband_half + 1e-12

    ramps_on = not sched.ltc or not any(outside(t, samples[0].V[t.mv_bus]) for t in trs if t.id in sched.ltc)
    ramp_seconds = 0.0
    status, diag = "horizon", ""
    t_now = 0.0
    while t_now + dt <= horizon_s + 1e-9:
        t_now += dt
        changed = False
        # tap changers
        for i, tr in enumerate(trs):
            vm_d = samples[-1].V[tr.mv_bus]
            if not outside(tr, vm_d):
                timer[tr.id] = 0.0
                exhausted.discard(tr.id)
                continue
            timer[tr.id] += dt
            delay = tr.delay_s if stepped[tr.id] == 0 else tr.delay_next_s
            if timer[tr.id] + 1e-9 < delay:
                continue
            # raising the ratio lowers the MV voltage
            direction = 1.0 if vm_d > tr.V_set else -1.0
            new_tap = round(tr.tap + direction * tr.tap_step, 10)
            if not tr.tap_min - 1e-12 <= new_tap <= tr.tap_max + 1e-12:
                exhausted.add(tr.id)
                timer[tr.id] = 0.0
                continue
            tr = trs[i] = replace(tr, tap=new_tap)
            case = case.with_transformer(tr.id, tap=new_tap)
            stepped[tr.id] += 1
            timer[tr.id] = 0.0
            changed = True
            ramps_on = True
        # voltage ramps
        ramping = False
        if ramps_on:
            for uid, target in targets.items():
                if ramp_steps[uid] == 0:
                    continue
                ramp_steps[uid] -= 1
                step = sched.ramp_rate * dt
                v = target if ramp_steps[uid] == 0 else vset[uid] + math.copysign(step, target - vset[uid])
                vset[uid] = v
                case = case.with_ibg(uid, V_set=v)
                ramping = changed = True
            if ramping:
                ramp_seconds += dt
        if changed:
            net = Network(case)
            try:
                pt = solve_powerflow(net, pt, {"lam": 0.0})
            except PowerFlowError as exc:
                status, diag = "diverged", f"t={t_now:g}s: {exc}"
                break
        samples.append(_sample(t_now, case, net, pt, k_grid))
        pending = any(outside(tr, samples[-1].V[tr.mv_bus]) and tr.id not in exhausted for tr in trs)
        if not pending and not any(ramp_steps.values()) and (ramps_on or not targets):
            status = "quiescent"
            break
    return QssTrace(
        feeder=case.name,
        samples=samples,
        status=status,
        ramp_seconds=ramp_seconds,
        tap_exhausted=sorted(exhausted),
        diagnostic=diag,
        ltc_buses=ltc_bus,
    )


def simulate_many(jobs: Sequence[tuple[NetworkCase, ControlSchedule]], horizon_s: float = 600.0,
                  workers: int = 1) -> list[QssTrace]:
    """Run independent feeder simulations, optionally on a thread pool."""
    if workers <= 1:
        return [qss_simulate(f, s, horizon_s) for f, s in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda j: qss_simulate(j[0], j[1], horizon_s), jobs))


# ----------------------------------------------------------------------
# indirect load shedding


def indirect_shed(P_k0: float, V_d: float, V_min: float, V_fin: float, a: float) -> float:
    """Load relief (MW) when the MV voltage settles at ``V_fin`` instead of ``V_min``.

    ``P_k0`` is the consumption observed at voltage ``V_d``.
    """
    if min(V_d, V_min, V_fin) <= 0:
        raise ValueError("voltages must be positive")
    return P_k0 / V_d**a * (V_min**a - V_fin**a)
