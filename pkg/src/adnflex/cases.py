"""Builders for the shipped study cases.

The JSON files under ``adnflex/data`` are produced by these functions (see
``python -m adnflex.cases``), so every number in them can be traced to a
line below.  Calibration steps (LTC tap, IBG voltage setpoints, load
scaling) run a few secant iterations on the power flow.
"""

from __future__ import annotations

import math
from dataclasses import replace
from importlib import resources
from pathlib import Path

from .netmodel import (
    AdnAttachment, Branch, Bus, ExpLoad, IbgUnit, NetworkCase, StressDirection, SyncGen,
    TransformerLTC, load_case, save_case,
)
from .powerflow import Network, solve_powerflow

DATA_DIR = Path(str(resources.files("adnflex") / "data"))

# corridor data: two identical halves, Thevenin source, remote load bus
CORRIDOR_R = 0.05
CORRIDOR_X = 0.2
CORRIDOR_BC = 2.0
CORRIDOR_E = 1.05
CORRIDOR_SHUNT = 0.2  # load-bus shunt reproducing the published frozen margin
ADN_P0 = -3.24
ADN_Q0 = 5.29


def data_path(name: str) -> Path:
    return DATA_DIR / name


def load_shipped(name: str) -> NetworkCase:
    return load_case(data_path(name))


def _secant(fun, x0: float, x1: float, tol: float = 1e-11, max_iter: int = 40) -> float:
    f0, f1 = fun(x0), fun(x1)
    for _ in range(max_iter):
        if abs(f1) < tol:
            return x1
        if f1 == f0:
            break
        x0, x1, f0 = x1, x1 - f1 * (x1 - x0) / (f1 - f0), f1
        f1 = fun(x1)
    if abs(f1) > 1e3 * tol:
        raise RuntimeError(f"calibration did not converge (residual {f1:.3e})")
    return x1


def _pt(case: NetworkCase):
    return solve_powerflow(case, None, {"lam": 0.0}, enforce_q_limits=False)


def _vm(case: NetworkCase, pt, bus: str) -> float:
    return float(pt.vm[case.bus_index()[bus]])


def calibrate_tap(case: NetworkCase, tr_id: str, target: float | None = None) -> NetworkCase:
    """Set the LTC tap so its MV bus sits exactly at ``target`` (default V_set)."""
    tr = next(t for t in case.transformers if t.id == tr_id)
    target = tr.V_set if target is None else target

    def err(tap):
        c = case.with_transformer(tr_id, tap=tap)
        return _vm(c, _pt(c), tr.mv_bus) - target

    tap = _secant(err, tr.tap, tr.tap * 1.01)
    return case.with_transformer(tr_id, tap=tap)


def calibrate_unity_pf(case: NetworkCase, tap_id: str | None = None) -> NetworkCase:
    """Choose IBG voltage setpoints so that every unit injects no reactive power.

    The units are replaced by constant-power injections at unity power
    factor; the voltages of that solution become the setpoints.  With
    ``tap_id`` the LTC tap is calibrated on the same solution.
    """
    if not case.ibgs:
        return calibrate_tap(case, tap_id) if tap_id else case
    pq = case.replace(
        ibgs=(),
        loads=case.loads + tuple(
            ExpLoad(f"__{u.id}", u.bus, -u.P_g0, 0.0, 1.0, 0.0, 0.0) for u in case.ibgs
        ),
    )
    if tap_id:
        pq = calibrate_tap(pq, tap_id)
        case = case.with_transformer(tap_id, tap=next(t.tap for t in pq.transformers if t.id == tap_id))
    pt = _pt(pq)
    for u in case.ibgs:
        case = case.with_ibg(u.id, V_set=_vm(pq, pt, u.bus))
    return case


def pcc_exchange(case: NetworkCase, pt=None) -> tuple[float, float]:
    """(P_j, Q_j) drawn from the grid source of a feeder, MW / Mvar."""
    pt = pt or solve_powerflow(case, None, {"lam": 0.0})
    net = Network(case)
    k = next(i for i, g in enumerate(net.gens) if g.id == "grid")
    x = net.layout.pack(pt)
    return float(net.gen_p(x)[k] * net.base), float(pt.q_gen[k] * net.base)


# ----------------------------------------------------------------------


def lossless_2bus() -> NetworkCase:
    return NetworkCase(
        name="lossless-2bus",
        base_MVA=100.0,
        buses=(Bus("src", "slack", 0.5, 1.5), Bus("load", "load", 0.5, 1.5)),
        branches=(Branch("line", "src", "load", 0.0, CORRIDOR_X),),
        generators=(SyncGen("th", "src", 0.0, V_ref=CORRIDOR_E),),
        stress=StressDirection({"load": 100.0}),
        notes="Thevenin source behind a lossless reactance; unity power factor stress.",
    )


def corridor(shunt_mode: str = "load-shunt", polygon=None) -> NetworkCase:
    """Radial corridor with an ADN at its midpoint.

    ``shunt_mode='load-shunt'`` places a 0.2 pu capacitor at the remote bus,
    the reading that reproduces the published frozen margin.
    ``'line-charging'`` splits B_c = 2 pu per half as pi-section charging.
    """
    if shunt_mode == "load-shunt":
        bc, b_load = 0.0, CORRIDOR_SHUNT
    elif shunt_mode == "line-charging":
        bc, b_load = CORRIDOR_BC, 0.0
    else:
        raise ValueError(f"unknown shunt mode {shunt_mode!r}")
    return NetworkCase(
        name=f"corridor-{shunt_mode}",
        base_MVA=100.0,
        buses=(
            Bus("src", "slack", 0.5, 1.5),
            Bus("mid", "adn-pcc", 0.5, 1.5),
            Bus("load", "load", 0.5, 1.5, b_sh=b_load),
        ),
        branches=(
            Branch("l1", "src", "mid", CORRIDOR_R, CORRIDOR_X, bc),
            Branch("l2", "mid", "load", CORRIDOR_R, CORRIDOR_X, bc),
        ),
        generators=(SyncGen("th", "src", 0.0, V_ref=CORRIDOR_E),),
        adns=(AdnAttachment("adn", "mid", ADN_P0, ADN_Q0, polygon=polygon),),
        stress=StressDirection({"load": 100.0}),
        notes=(
            "Two identical halves R=0.05, X=0.2 pu; E_th=1.05 pu. "
            + ("B_c modelled as a 0.2 pu shunt at the load bus." if bc == 0
               else "B_c=2 pu per half as line charging.")
        ),
    )


def table2_feeder() -> NetworkCase:
    """Two-bus ADN: aggregate load on the LTC bus, one IBG behind a line.

    Powers on a 100 MVA base.  The IBG rating (115 MVA) and the 0.95/1.05
    pu limits are study choices; the remaining data are the published
    initial operating point.
    """
    case = NetworkCase(
        name="table2-feeder",
        base_MVA=100.0,
        scope="feeder",
        buses=(
            Bus("pcc", "slack", 0.5, 1.5),
            Bus("d", "feeder-internal", 0.95, 1.05),
            Bus("g", "feeder-internal", 0.95, 1.05),
        ),
        branches=(Branch("dg", "d", "g", 0.004413333, 0.0608),),
        transformers=(TransformerLTC("ltc", "pcc", "d", 0.0015, V_set=1.0),),
        loads=(ExpLoad("ld", "d", 696.784, 142.471, 1.0, 1.0, 2.0),),
        ibgs=(IbgUnit("ibg", "g", 115.0, 97.2, V_set=1.0),),
        generators=(SyncGen("grid", "pcc", 0.0, V_ref=1.0),),
        notes="Two-bus ADN with one aggregate load and one IBG; S_nom and voltage limits chosen for the study.",
    )
    return calibrate_unity_pf(case, "ltc")


# 30-bus synthetic feeder ------------------------------------------------

_TRUNK = ["30", "1", "2", "3", "4", "5", "6", "7", "8", "9", "10"]
_LATERALS = {
    "3": ["11", "12", "13", "14", "15"],
    "12": ["16", "17", "18", "19"],
    "6": ["20", "21", "22", "23", "24"],
    "8": ["25", "26", "27", "28", "29"],
}
# (S_nom MVA, P_g MW) at buses 4, 10, 16, 22, 25
_IBGS = {"4": (8.8, 4.0), "10": (6.6, 3.3), "16": (5.5, 2.0), "22": (2.75, 2.0), "25": (5.5, 3.0)}


def _feeder30_raw(p_scale: float, q_scale: float, storage: bool) -> NetworkCase:
    buses = [Bus("pcc", "slack", 0.5, 1.5, base_kV=220.0)]
    buses += [Bus(b, "feeder-internal", 0.95, 1.05, base_kV=20.0) for b in
              _TRUNK + [x for lat in _LATERALS.values() for x in lat]]
    branches = []
    for a, b in zip(_TRUNK, _TRUNK[1:]):
        branches.append(Branch(f"{a}-{b}", a, b, 0.030, 0.045))
    for root, chain in _LATERALS.items():
        prev = root
        for b in chain:
            branches.append(Branch(f"{prev}-{b}", prev, b, 0.045, 0.040))
            prev = b
    loads = []
    for i, b in enumerate(buses[2:]):
        # deterministic spread of bus loads around 0.4 MW / 0.17 Mvar
        w = 0.6 + 0.8 * ((i * 7) % 11) / 10.0
        loads.append(ExpLoad(f"ld{b.id}", b.id, round(0.4 * w, 4) * p_scale,
                             round(0.17 * w, 4) * q_scale, 1.0, 1.0, 2.0))
    ibgs = []
    for b, (s, p) in _IBGS.items():
        lo, hi = (0.0, s) if storage else (None, None)
        ibgs.append(IbgUnit(f"ibg{b}", b, s, p, V_set=1.0, P_g_min=lo, P_g_max=hi))
    return NetworkCase(
        name="feeder30" + ("" if storage else "-nostorage"),
        base_MVA=100.0,
        scope="feeder",
        buses=tuple(buses),
        branches=tuple(branches),
        transformers=(TransformerLTC("ltc", "pcc", "30", 0.6, V_set=1.0),),
        loads=tuple(loads),
        ibgs=tuple(ibgs),
        generators=(SyncGen("grid", "pcc", 0.0, V_ref=1.0),),
        notes=(
            "Synthetic 30-bus, 20 kV feeder behind a 20 MVA transformer with five "
            "IBGs; loads scaled so the PCC exchange is (-3.24 MW, 5.29 Mvar)."
        ),
    )


def feeder30(storage: bool = True) -> NetworkCase:
    """30-bus-class synthetic feeder calibrated to the corridor ADN exchange."""
    ps, qs = 1.0, 1.0
    for _ in range(30):
        case = calibrate_unity_pf(_feeder30_raw(ps, qs, storage), "ltc")
        pj, qj = pcc_exchange(case)
        if abs(pj - ADN_P0) < 1e-9 and abs(qj - ADN_Q0) < 1e-9:
            break
        tot_p = sum(ld.P_0 for ld in case.loads) / ps
        tot_q = sum(ld.Q_0 for ld in case.loads) / qs
        ps += (ADN_P0 - pj) / tot_p
        qs += (ADN_Q0 - qj) / tot_q
    return case


def build_all(out_dir: Path = DATA_DIR, polygons: bool = True) -> dict[str, Path]:
    """Regenerate every shipped case file; returns name -> path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}

    def put(name, case):
        p = out_dir / name
        save_case(case, p)
        written[name] = p

    put("lossless_2bus.json", lossless_2bus())
    t2 = table2_feeder()
    put("table2_feeder.json", t2)
    f30 = feeder30(True)
    put("feeder30.json", f30)
    put("feeder30_nostorage.json", feeder30(False))
    put("corridor.json", corridor("load-shunt"))
    put("corridor_bc_split.json", corridor("line-charging"))
    if polygons:
        from .flex import radial_scan, reduce_polygon

        poly30 = reduce_polygon(radial_scan(f30, 3.0), 6, anchor=ADN_ANCHOR)
        poly2 = reduce_polygon(radial_scan(t2, 3.0), 6, anchor=pcc_exchange(t2))
        put("corridor_flex30.json", corridor("load-shunt", poly30))
        put("corridor_flex2bus.json", corridor("load-shunt", poly2))
    return written


ADN_ANCHOR = (ADN_P0, ADN_Q0)


if __name__ == "__main__":  # pragma: no cover
    for name, path in build_all().items():
        print(name, path)
