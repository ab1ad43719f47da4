"""Per-unit network data model and JSON case files.

A case file describes one study: a transmission grid or a distribution
feeder.  Powers are stored as written in the file (MW / Mvar) and converted
to per unit on ``base_MVA`` only when a solver compiles the case, so that a
load/save round trip reproduces the file values exactly.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .gencaps import CapabilityParams
from .polygon import FlexPolygon, PolygonError

BUS_KINDS = ("slack", "generator", "load", "adn-pcc", "feeder-internal")
SCOPES = ("transmission", "feeder")


class CaseError(ValueError):
    """Malformed or inconsistent case file."""


class InfeasibleCaseError(CaseError):
    """Well-formed case without a base operating point."""


def to_pu(value_mw: float, base_mva: float) -> float:
    return value_mw / base_mva


def from_pu(value_pu: float, base_mva: float) -> float:
    return value_pu * base_mva


@dataclass(frozen=True)
class Bus:
    id: str
    kind: str = "load"
    V_min: float = 0.9
    V_max: float = 1.1
    base_kV: float = 1.0
    b_sh: float = 0.0  # shunt susceptance [pu], capacitive > 0
    g_sh: float = 0.0


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: str
    to_bus: str
    R: float
    X: float
    B_c: float = 0.0  # total line charging, split half to each end
    in_service: bool = True


@dataclass(frozen=True)
class TransformerLTC:
    """Lossless transformer with an on-load tap changer.

    ``tap`` is the off-nominal ratio on the HV side, so the MV voltage is
    roughly ``V_hv / tap``; raising the tap lowers the regulated voltage.
    """

    id: str
    hv_bus: str
    mv_bus: str
    X_t: float
    V_set: float = 1.0
    deadband_half: float = 0.01
    tap: float = 1.0
    tap_min: float = 0.9
    tap_max: float = 1.1
    tap_step: float = 0.01
    delay_s: float = 30.0
    delay_next_s: float = 10.0
    in_service: bool = True


@dataclass(frozen=True)
class ExpLoad:
    """``P = P_0 (V/V_0)^a``, ``Q = Q_0 (V/V_0)^b`` inside feeders."""

    id: str
    bus: str
    P_0: float
    Q_0: float
    V_0: float = 1.0
    a: float = 1.0
    b: float = 2.0


@dataclass(frozen=True)
class IbgUnit:
    id: str
    bus: str
    S_nom: float
    P_g0: float
    V_set: float = 1.0
    I_N: float = 1.0
    P_g_min: float | None = None
    P_g_max: float | None = None

    @property
    def p_range(self) -> tuple[float, float]:
        lo = self.P_g0 if self.P_g_min is None else self.P_g_min
        hi = self.P_g0 if self.P_g_max is None else self.P_g_max
        return lo, hi

    @property
    def dispatchable(self) -> bool:
        lo, hi = self.p_range
        return hi > lo


@dataclass(frozen=True)
class SyncGen:
    """Synchronous machine or network equivalent source.

    ``caps=None`` means no reactive limits (e.g. a Thevenin source or the
    upstream grid seen from a feeder).  ``P_min``/``P_max`` of ``None`` are
    unbounded.
    """

    id: str
    bus: str
    P_g0: float
    V_ref: float = 1.0
    w: float = 1.0
    P_min: float | None = None
    P_max: float | None = None
    caps: CapabilityParams | None = None
    in_service: bool = True


@dataclass(frozen=True)
class StressDirection:
    d_p: dict[str, float] = field(default_factory=dict)
    d_q: dict[str, float] = field(default_factory=dict)

    def __hash__(self) -> int:
        return hash((tuple(sorted(self.d_p.items())), tuple(sorted(self.d_q.items()))))

    @property
    def total_p(self) -> float:
        return float(sum(self.d_p.values()))


@dataclass(frozen=True)
class AdnAttachment:
    """ADN seen from the transmission grid as a PQ consumption at its PCC."""

    id: str
    pcc_bus: str
    P_j0: float
    Q_j0: float
    feeder: "NetworkCase | None" = None
    polygon: FlexPolygon | None = None


@dataclass(frozen=True)
class NetworkCase:
    name: str
    base_MVA: float
    scope: str = "transmission"
    buses: tuple[Bus, ...] = ()
    branches: tuple[Branch, ...] = ()
    transformers: tuple[TransformerLTC, ...] = ()
    loads: tuple[ExpLoad, ...] = ()
    ibgs: tuple[IbgUnit, ...] = ()
    generators: tuple[SyncGen, ...] = ()
    adns: tuple[AdnAttachment, ...] = ()
    stress: StressDirection | None = None
    notes: str = ""

    def bus_index(self) -> dict[str, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    def bus(self, bus_id: str) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)

    @property
    def slack_bus(self) -> Bus:
        slacks = [b for b in self.buses if b.kind == "slack"]
        if len(slacks) != 1:
            raise CaseError("no slack bus" if not slacks else "more than one slack bus")
        return slacks[0]

    def replace(self, **changes) -> "NetworkCase":
        return replace(self, **changes)

    def with_generator(self, gen_id: str, **changes) -> "NetworkCase":
        gens = tuple(replace(g, **changes) if g.id == gen_id else g for g in self.generators)
        return replace(self, generators=gens)

    def with_adn(self, adn_id: str, **changes) -> "NetworkCase":
        adns = tuple(replace(a, **changes) if a.id == adn_id else a for a in self.adns)
        return replace(self, adns=adns)

    def with_ibg(self, ibg_id: str, **changes) -> "NetworkCase":
        ibgs = tuple(replace(u, **changes) if u.id == ibg_id else u for u in self.ibgs)
        return replace(self, ibgs=ibgs)

    def with_transformer(self, tr_id: str, **changes) -> "NetworkCase":
        trs = tuple(replace(t, **changes) if t.id == tr_id else t for t in self.transformers)
        return replace(self, transformers=trs)


# --------------------------------------------------------------------------
# schema

_num = {"type": "number"}
_opt_num = {"type": ["number", "null"]}
_str = {"type": "string"}

CAPS_SCHEMA = {
    "type": "object",
    "required": ["S_N", "P_N", "E_lim", "X_l", "X_ad"],
    "properties": {k: _num for k in ("S_N", "P_N", "E_lim", "X_l", "X_ad", "m", "n", "V_N")},
    "additionalProperties": False,
}

POLYGON_SCHEMA = {
    "type": "object",
    "required": ["vertices"],
    "properties": {
        "vertices": {
            "type": "array",
            "items": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
            "minItems": 1,
        },
        "anchor": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
        "half_planes": {"type": "array"},
        "metadata": {"type": "object"},
    },
}

CASE_SCHEMA: dict[str, Any] = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "adnflex network case",
    "type": "object",
    "required": ["name", "base_MVA", "buses"],
    "properties": {
        "name": _str,
        "base_MVA": {"type": "number", "exclusiveMinimum": 0},
        "scope": {"enum": list(SCOPES)},
        "notes": _str,
        "buses": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "kind"],
                "properties": {
                    "id": _str,
                    "kind": {"enum": list(BUS_KINDS)},
                    "V_min": _num,
                    "V_max": _num,
                    "base_kV": _num,
                    "b_sh": _num,
                    "g_sh": _num,
                },
                "additionalProperties": False,
            },
        },
        "branches": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "from", "to", "R", "X"],
                "properties": {
                    "id": _str, "from": _str, "to": _str, "R": _num, "X": _num,
                    "B_c": _num, "in_service": {"type": "boolean"},
                },
                "additionalProperties": False,
            },
        },
        "transformers": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "hv_bus", "mv_bus", "X_t"],
                "properties": {
                    "id": _str, "hv_bus": _str, "mv_bus": _str, "X_t": _num,
                    "V_set": _num, "deadband_half": _num, "tap": _num,
                    "tap_min": _num, "tap_max": _num, "tap_step": _num,
                    "delay_s": _num, "delay_next_s": _num,
                    "in_service": {"type": "boolean"},
                },
                "additionalProperties": False,
            },
        },
        "loads": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "bus", "P_0", "Q_0"],
                "properties": {
                    "id": _str, "bus": _str, "P_0": _num, "Q_0": _num,
                    "V_0": _num, "a": _num, "b": _num,
                },
                "additionalProperties": False,
            },
        },
        "ibgs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "bus", "S_nom", "P_g0"],
                "properties": {
                    "id": _str, "bus": _str, "S_nom": _num, "P_g0": _num,
                    "V_set": _num, "I_N": _num, "P_g_min": _opt_num, "P_g_max": _opt_num,
                },
                "additionalProperties": False,
            },
        },
        "generators": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "bus", "P_g0"],
                "properties": {
                    "id": _str, "bus": _str, "P_g0": _num, "V_ref": _num, "w": _num,
                    "P_min": _opt_num, "P_max": _opt_num,
                    "caps": {"oneOf": [{"type": "null"}, CAPS_SCHEMA]},
                    "in_service": {"type": "boolean"},
                },
                "additionalProperties": False,
            },
        },
        "adns": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "pcc_bus", "P_j0", "Q_j0"],
                "properties": {
                    "id": _str, "pcc_bus": _str, "P_j0": _num, "Q_j0": _num,
                    "feeder": {"type": ["object", "string", "null"]},
                    "polygon": {"oneOf": [{"type": "null"}, {"type": "string"}, POLYGON_SCHEMA]},
                },
                "additionalProperties": False,
            },
        },
        "stress": {
            "type": ["object", "null"],
            "properties": {
                "d_p": {"type": "object", "additionalProperties": _num},
                "d_q": {"type": "object", "additionalProperties": _num},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}


def _where(err: jsonschema.ValidationError) -> str:
    path = "/".join(str(p) for p in err.absolute_path)
    return path or "<root>"


def polygon_from_dict(d: dict) -> FlexPolygon:
    try:
        return FlexPolygon(
            tuple(tuple(v) for v in d["vertices"]),
            tuple(d.get("anchor", (0.0, 0.0))),
            dict(d.get("metadata", {})),
        )
    except PolygonError as exc:
        raise CaseError(f"invalid polygon: {exc}") from exc


def polygon_to_dict(poly: FlexPolygon) -> dict:
    return {
        "vertices": [list(v) for v in poly.vertices],
        "anchor": list(poly.anchor),
        "half_planes": [list(h) for h in poly.half_planes],
        "metadata": dict(poly.metadata),
    }


def case_from_dict(doc: dict, base_dir: Path | None = None) -> NetworkCase:
    """Build a case from a parsed document; raises :class:`CaseError`."""
    errors = sorted(jsonschema.Draft7Validator(CASE_SCHEMA).iter_errors(doc), key=str)
    if errors:
        if any(e.validator == "required" and "base_MVA" in e.message for e in errors):
            raise CaseError("missing base declaration 'base_MVA'")
        e = errors[0]
        raise CaseError(f"schema error at {_where(e)}: {e.message}")

    buses = tuple(
        Bus(
            id=b["id"], kind=b["kind"], V_min=b.get("V_min", 0.9), V_max=b.get("V_max", 1.1),
            base_kV=b.get("base_kV", 1.0), b_sh=b.get("b_sh", 0.0), g_sh=b.get("g_sh", 0.0),
        )
        for b in doc["buses"]
    )
    ids = [b.id for b in buses]
    dup = [k for k, c in Counter(ids).items() if c > 1]
    if dup:
        raise CaseError(f"duplicate bus id {dup[0]!r}")
    known = set(ids)

    def ref(section: str, i: int, key: str, value: str) -> str:
        if value not in known:
            raise CaseError(f"dangling bus reference {value!r} at {section}/{i}/{key}")
        return value

    branches = tuple(
        Branch(
            id=r["id"], from_bus=ref("branches", i, "from", r["from"]),
            to_bus=ref("branches", i, "to", r["to"]), R=r["R"], X=r["X"],
            B_c=r.get("B_c", 0.0), in_service=r.get("in_service", True),
        )
        for i, r in enumerate(doc.get("branches", []))
    )
    transformers = []
    for i, t in enumerate(doc.get("transformers", [])):
        kw = {k: v for k, v in t.items() if k not in ("hv_bus", "mv_bus")}
        transformers.append(
            TransformerLTC(
                hv_bus=ref("transformers", i, "hv_bus", t["hv_bus"]),
                mv_bus=ref("transformers", i, "mv_bus", t["mv_bus"]),
                **kw,
            )
        )
    loads = []
    for i, ld in enumerate(doc.get("loads", [])):
        ref("loads", i, "bus", ld["bus"])
        loads.append(ExpLoad(**ld))
    ibgs = []
    for i, u in enumerate(doc.get("ibgs", [])):
        ref("ibgs", i, "bus", u["bus"])
        ibgs.append(IbgUnit(**u))
    gens = []
    for i, g in enumerate(doc.get("generators", [])):
        ref("generators", i, "bus", g["bus"])
        kw = dict(g)
        caps = kw.pop("caps", None)
        gens.append(SyncGen(caps=CapabilityParams(**caps) if caps else None, **kw))
    adns = []
    for i, a in enumerate(doc.get("adns", [])):
        ref("adns", i, "pcc_bus", a["pcc_bus"])
        feeder = a.get("feeder")
        if isinstance(feeder, str):
            feeder = load_case((base_dir or Path(".")) / feeder)
        elif isinstance(feeder, dict):
            feeder = case_from_dict(feeder, base_dir)
        poly = a.get("polygon")
        if isinstance(poly, str):
            path = (base_dir or Path(".")) / poly
            poly = polygon_from_dict(_read_json(path))
        elif isinstance(poly, dict):
            poly = polygon_from_dict(poly)
        adns.append(
            AdnAttachment(
                id=a["id"], pcc_bus=a["pcc_bus"], P_j0=a["P_j0"], Q_j0=a["Q_j0"],
                feeder=feeder, polygon=poly,
            )
        )
    stress = None
    if doc.get("stress") is not None:
        s = doc["stress"]
        for section in ("d_p", "d_q"):
            for bus in s.get(section, {}):
                if bus not in known:
                    raise CaseError(f"dangling bus reference {bus!r} at stress/{section}")
        stress = StressDirection(dict(s.get("d_p", {})), dict(s.get("d_q", {})))

    case = NetworkCase(
        name=doc["name"], base_MVA=doc["base_MVA"], scope=doc.get("scope", "transmission"),
        buses=buses, branches=branches, transformers=tuple(transformers), loads=tuple(loads),
        ibgs=tuple(ibgs), generators=tuple(gens), adns=tuple(adns), stress=stress,
        notes=doc.get("notes", ""),
    )
    case.slack_bus  # raises "no slack bus"
    return case


def _read_json(path: Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CaseError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(f"{path}: parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def load_case(path: str | Path) -> NetworkCase:
    """Read and resolve a JSON case file."""
    path = Path(path)
    doc = _read_json(path)
    try:
        return case_from_dict(doc, path.parent)
    except CaseError as exc:
        raise CaseError(f"{path}: {exc}") from exc


def _clean(d: dict, defaults: dict) -> dict:
    return {k: v for k, v in d.items() if not (k in defaults and defaults[k] == v)}


def case_to_dict(case: NetworkCase) -> dict:
    """Serialise a case; default-valued optional fields are omitted."""
    doc: dict[str, Any] = {"name": case.name, "base_MVA": case.base_MVA, "scope": case.scope}
    if case.notes:
        doc["notes"] = case.notes
    doc["buses"] = [
        _clean(
            {"id": b.id, "kind": b.kind, "V_min": b.V_min, "V_max": b.V_max,
             "base_kV": b.base_kV, "b_sh": b.b_sh, "g_sh": b.g_sh},
            {"b_sh": 0.0, "g_sh": 0.0},
        )
        for b in case.buses
    ]
    doc["branches"] = [
        {"id": r.id, "from": r.from_bus, "to": r.to_bus, "R": r.R, "X": r.X, "B_c": r.B_c,
         "in_service": r.in_service}
        for r in case.branches
    ]
    doc["transformers"] = [
        {k: getattr(t, k) for k in TransformerLTC.__dataclass_fields__} for t in case.transformers
    ]
    doc["loads"] = [{k: getattr(ld, k) for k in ExpLoad.__dataclass_fields__} for ld in case.loads]
    doc["ibgs"] = [{k: getattr(u, k) for k in IbgUnit.__dataclass_fields__} for u in case.ibgs]
    gens = []
    for g in case.generators:
        d = {k: getattr(g, k) for k in SyncGen.__dataclass_fields__ if k != "caps"}
        d["caps"] = (
            None if g.caps is None
            else {k: getattr(g.caps, k) for k in ("S_N", "P_N", "E_lim", "X_l", "X_ad", "m", "n", "V_N")}
        )
        gens.append(d)
    doc["generators"] = gens
    doc["adns"] = [
        {
            "id": a.id, "pcc_bus": a.pcc_bus, "P_j0": a.P_j0, "Q_j0": a.Q_j0,
            "feeder": None if a.feeder is None else case_to_dict(a.feeder),
            "polygon": None if a.polygon is None else polygon_to_dict(a.polygon),
        }
        for a in case.adns
    ]
    doc["stress"] = (
        None if case.stress is None else {"d_p": dict(case.stress.d_p), "d_q": dict(case.stress.d_q)}
    )
    return doc


def dumps_case(case: NetworkCase) -> str:
    return json.dumps(case_to_dict(case), indent=2)


def save_case(case: NetworkCase, path: str | Path) -> None:
    Path(path).write_text(dumps_case(case) + "\n")


# --------------------------------------------------------------------------
# validation


def is_connected(case: NetworkCase) -> bool:
    idx = case.bus_index()
    edges = [(idx[r.from_bus], idx[r.to_bus]) for r in case.branches if r.in_service]
    edges += [(idx[t.hv_bus], idx[t.mv_bus]) for t in case.transformers if t.in_service]
    n = len(case.buses)
    if n == 0:
        return False
    if not edges:
        return n == 1
    i, j = zip(*edges)
    g = coo_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
    ncomp, _ = connected_components(g, directed=False)
    return ncomp == 1


def validate_case(case: NetworkCase) -> list[str]:
    """List every invariant violation; an empty list means well-formed."""
    out: list[str] = []
    slacks = [b for b in case.buses if b.kind == "slack"]
    if not slacks:
        out.append("no slack bus")
    elif len(slacks) > 1:
        out.append("more than one slack bus")
    if case.scope not in SCOPES:
        out.append(f"unknown scope {case.scope!r}")
    if case.base_MVA <= 0:
        out.append("non-positive base_MVA")
    for b in case.buses:
        if not b.V_min < b.V_max:
            out.append(f"bus {b.id}: V_min must be below V_max")
    for r in case.branches:
        if r.X == 0:
            out.append(f"branch {r.id}: zero reactance")
        if r.R < 0:
            out.append(f"branch {r.id}: negative resistance")
    for t in case.transformers:
        if t.tap_min == t.tap_max:
            out.append(f"transformer {t.id}: degenerate tap range")
        elif t.tap_min > t.tap_max:
            out.append(f"transformer {t.id}: tap_min above tap_max")
        if t.deadband_half <= 0:
            out.append(f"transformer {t.id}: non-positive deadband")
        if t.X_t == 0:
            out.append(f"transformer {t.id}: zero reactance")
    for ld in case.loads:
        if ld.V_0 <= 0:
            out.append(f"load {ld.id}: non-positive V_0")
    for u in case.ibgs:
        lo, hi = u.p_range
        if not lo <= u.P_g0 <= hi:
            out.append(f"ibg {u.id}: P_g0 outside dispatch range")
        if u.I_N <= 0 or u.S_nom <= 0:
            out.append(f"ibg {u.id}: non-positive current limit")
    active = [g for g in case.generators if g.in_service]
    for g in active:
        lo = -math.inf if g.P_min is None else g.P_min
        hi = math.inf if g.P_max is None else g.P_max
        if not lo <= g.P_g0 <= hi:
            out.append(f"generator {g.id}: P_g0 outside [P_min, P_max]")
        if g.w < 0:
            out.append(f"generator {g.id}: negative participation factor")
        if g.caps is not None:
            out += [f"generator {g.id}: {f}" for f in g.caps.findings()]
    if active and abs(sum(g.w for g in active) - 1.0) > 1e-9:
        out.append("participation factors not normalized")
    if slacks and not any(g.bus == slacks[0].id for g in active):
        out.append("no in-service generator at the slack bus")
    controlled = Counter(g.bus for g in active) + Counter(u.bus for u in case.ibgs)
    for bus, c in controlled.items():
        if c > 1:
            out.append(f"bus {bus}: more than one voltage-controlling unit")
    if case.stress is not None:
        if case.stress.total_p <= 0:
            out.append("stress direction has non-positive total active component")
    if case.buses and not is_connected(case):
        out.append("network is not connected")
    for a in case.adns:
        if a.feeder is not None:
            f = a.feeder
            try:
                pcc = f.slack_bus.id
            except CaseError:
                out.append(f"adn {a.id}: feeder has no unique slack (PCC) bus")
                continue
            ltcs = [t for t in f.transformers if t.hv_bus == pcc]
            if len(ltcs) != 1:
                out.append(f"adn {a.id}: feeder must have exactly one LTC at the PCC")
            out += [f"adn {a.id}: {m}" for m in validate_case(f)]
        if a.polygon is not None and not a.polygon.is_degenerate:
            if not a.polygon.origin_interior():
                out.append(f"adn {a.id}: polygon does not contain the origin")
    return out
