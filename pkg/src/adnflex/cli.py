"""Command-line front end.

Exit codes: 0 success, 1 usage or input error, 2 solver failure,
3 infeasible case.  ``--json`` prints a machine-readable summary on stdout;
artifacts are written atomically next to the requested output path.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import cases
from .control import ControlError, SetpointCommand, load_schedule, qss_simulate, track_setpoint
from .feeder_opf import FeederError
from .flex import (
    FlexError,
    corner_points_2bus,
    corner_polygon,
    polygon_csv,
    polygon_json,
    radial_scan,
    reduce_polygon,
    scan_csv,
    timestamp,
)
from .netmodel import CaseError, InfeasibleCaseError, NetworkCase, load_case
from .polygon import PolygonError
from .powerflow import PowerFlowError, pv_curve
from .vsm import IslandingError, VsmError, VsmProblemSpec, solve_vsm

EXIT_OK, EXIT_USAGE, EXIT_SOLVER, EXIT_INFEASIBLE = 0, 1, 2, 3

log = logging.getLogger("adnflex")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2
        raise UsageError(f"{self.prog}: {message}")


def _write(path: Path, text: str) -> None:
    """Write ``text`` so readers never see a partial file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _load(spec: str) -> NetworkCase:
    """Case from a file path or the name of a shipped case."""
    p = Path(spec)
    if p.exists():
        return load_case(p)
    name = spec if spec.endswith(".json") else f"{spec}.json"
    shipped = cases.data_path(name)
    if shipped.exists():
        return load_case(shipped)
    raise UsageError(f"case file {spec!r} not found")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n"


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


# ----------------------------------------------------------------------
# subcommands


def cmd_flex(args) -> dict:
    feeder = _load(args.case)
    if feeder.scope != "feeder":
        raise UsageError(f"flex needs a feeder case, {feeder.name!r} is {feeder.scope}-scoped")
    anchor = cases.pcc_exchange(feeder)
    out = Path(args.out or f"{feeder.name}-flex")
    meta = {"generated": timestamp(), "case": feeder.name}
    if args.method == "corners":
        corners = corner_points_2bus(feeder)
        poly = corner_polygon(corners, anchor)
        extra = {"corners": [
            {"label": c.label, "binding": list(c.binding), "dP": c.dP, "dQ": c.dQ,
             "feasible": c.feasible, "coincident_with": c.coincident_with} for c in corners]}
    else:
        pts = radial_scan(feeder, args.dtheta, workers=args.workers)
        poly = reduce_polygon(pts, args.vertices, anchor=anchor, metadata={"dtheta": args.dtheta})
        _write(out.with_name(out.name + "-scan.csv"), scan_csv(pts))
        extra = {"scan_points": len(pts)}
    _write(out.with_suffix(".json"), polygon_json(poly, **meta))
    _write(out.with_suffix(".csv"), polygon_csv(poly))
    return {
        "method": args.method,
        "vertices": [list(v) for v in poly.vertices],
        "half_planes": [list(h) for h in poly.half_planes],
        "anchor": list(anchor),
        "artifacts": [str(out.with_suffix(".json")), str(out.with_suffix(".csv"))],
        **extra,
    }


def _vsm_one(case: NetworkCase, flexible: bool, contingency: str | None) -> dict:
    spec = VsmProblemSpec(case, contingency=contingency, adn_mode="flexible" if flexible else "frozen")
    sol = solve_vsm(spec)
    return {"contingency": contingency, **sol.to_dict()}


def cmd_vsm(args) -> dict:
    case = _load(args.case)
    if args.contingency == "all":
        ids = [br.id for br in case.branches if br.in_service]

        def screen(bid):
            try:
                return _vsm_one(case, args.flex, bid)
            except IslandingError as exc:
                return {"contingency": bid, "skipped": str(exc)}
            except (VsmError, PowerFlowError) as exc:
                return {"contingency": bid, "failed": str(exc)}

        with ThreadPoolExecutor(max(1, args.workers)) as pool:
            results = list(pool.map(screen, ids))
        report = {"case": case.name, "mode": "flexible" if args.flex else "frozen",
                  "contingencies": results}
    else:
        report = {"case": case.name, "mode": "flexible" if args.flex else "frozen",
                  **_vsm_one(case, args.flex, args.contingency)}
    if args.out:
        _write(Path(args.out), _dumps(report))
    return report


def cmd_track(args) -> dict:
    feeder = _load(args.case)
    res = track_setpoint(feeder, SetpointCommand(args.pref, args.qref))
    report = {"case": feeder.name, **res.to_dict()}
    if args.out:
        _write(Path(args.out), _dumps(report))
    return report


def cmd_simulate(args) -> dict:
    feeder = _load(args.case)
    if not Path(args.schedule).exists():
        raise UsageError(f"schedule file {args.schedule!r} not found")
    sched = load_schedule(args.schedule)
    trace = qss_simulate(feeder, sched, args.horizon)
    out = Path(args.out or f"{feeder.name}-qss.csv")
    _write(out, trace.to_csv())
    report = {
        "case": feeder.name,
        "status": trace.status,
        "t_end": trace.last.t,
        "ramp_seconds": trace.ramp_seconds,
        "taps": trace.last.taps,
        "tap_exhausted": trace.tap_exhausted,
        "dP_j": trace.dP_j,
        "dQ_j": trace.last.Q_j - trace.first.Q_j,
        "artifact": str(out),
    }
    if trace.status == "diverged":
        raise ControlError(trace.diagnostic)
    return report


def cmd_pv_curve(args) -> dict:
    case = _load(args.case)
    if args.bus is not None:
        case.bus(args.bus)  # KeyError for an unknown bus
    curve = pv_curve(case, args.step, min_step_MW=args.min_step)
    out = Path(args.out or f"{case.name}-pv.csv")
    _write(out, curve.to_csv(args.bus))
    return {
        "case": case.name,
        "lam_max": curve.lam_max,
        "margin_MW": curve.margin_MW,
        "margin_pu": curve.margin_MW / case.base_MVA,
        "points": len(curve.lam),
        "artifact": str(out),
    }


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS,
                        help="print a JSON summary on stdout")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    p = _Parser(prog="adnflex", description="Flexibility regions and voltage stability margins.",
                parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("flex", parents=[common], help="flexibility polygon of a feeder")
    f.add_argument("case")
    f.add_argument("--method", choices=("corners", "scan"), default="scan")
    f.add_argument("--dtheta", type=float, default=3.0, help="scan step in degrees")
    f.add_argument("--vertices", type=int, default=6, help="vertex budget of the reduced polygon")
    f.add_argument("--workers", type=int, default=1)
    f.add_argument("--out", help="output prefix; .json and .csv are appended")
    f.set_defaults(run=cmd_flex)

    v = sub.add_parser("vsm", parents=[common], help="voltage stability margin OPF")
    v.add_argument("case")
    v.add_argument("--flex", action="store_true", help="let ADNs move inside their polygons")
    v.add_argument("--contingency", help="branch id to remove, or 'all' to screen every branch")
    v.add_argument("--workers", type=int, default=1)
    v.add_argument("--out", help="JSON report path")
    v.set_defaults(run=cmd_vsm)

    t = sub.add_parser("track", parents=[common], help="setpoints realising a PCC reference")
    t.add_argument("case")
    t.add_argument("--pref", type=float, required=True, help="P reference (MW)")
    t.add_argument("--qref", type=float, required=True, help="Q reference (Mvar)")
    t.add_argument("--out", help="JSON report path")
    t.set_defaults(run=cmd_track)

    s = sub.add_parser("simulate", parents=[common], help="quasi-steady-state LTC and ramp simulation")
    s.add_argument("case")
    s.add_argument("--schedule", required=True, help="JSON control schedule")
    s.add_argument("--horizon", type=float, default=600.0, help="seconds")
    s.add_argument("--out", help="trace CSV path")
    s.set_defaults(run=cmd_simulate)

    c = sub.add_parser("pv-curve", parents=[common], help="PV curve by repeated power flow")
    c.add_argument("case")
    c.add_argument("--bus", help="only export this bus voltage")
    c.add_argument("--step", type=float, default=10.0, help="initial load step (MW)")
    c.add_argument("--min-step", type=float, default=1e-3, help="smallest step before stopping (MW)")
    c.add_argument("--out", help="CSV path")
    c.set_defaults(run=cmd_pv_curve)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    args.json = getattr(args, "json", False)
    args.verbose = getattr(args, "verbose", False)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        report = args.run(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InfeasibleCaseError, IslandingError, PolygonError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (CaseError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VsmError, FeederError, FlexError, ControlError, PowerFlowError, np.linalg.LinAlgError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    if args.json:
        sys.stdout.write(_dumps(report))
    else:
        for k, v in report.items():
            if not isinstance(v, (dict, list)):
                print(f"{k}: {v}")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
