import json

import pytest

from adnflex import cases
from adnflex.cli import EXIT_INFEASIBLE, EXIT_OK, EXIT_SOLVER, EXIT_USAGE, main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_flex_corners_writes_hexagon(tmp_path, capsys):
    prefix = tmp_path / "t2"
    code, out, _ = run(capsys, "flex", "table2_feeder", "--method", "corners", "--out", str(prefix), "--json")
    assert code == EXIT_OK
    rep = json.loads(out)
    assert len(rep["vertices"]) == 6
    assert [c["label"] for c in rep["corners"]] == list("ABCDEF")
    doc = json.loads((tmp_path / "t2.json").read_text())
    assert len(doc["vertices"]) == 6
    assert (tmp_path / "t2.csv").read_text().count("\n") == 7


def test_flex_scan_is_deterministic(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        code, _, _ = run(capsys, "flex", "table2_feeder", "--dtheta", "30", "--workers", "2",
                         "--out", str(tmp_path / name))
        assert code == EXIT_OK
        text = (tmp_path / f"{name}.json").read_text()
        outs.append([ln for ln in text.splitlines() if "generated" not in ln])
        assert (tmp_path / f"{name}-scan.csv").exists()
    assert outs[0] == outs[1]


def test_flex_rejects_transmission_case(capsys):
    code, _, err = run(capsys, "flex", "corridor")
    assert code == EXIT_USAGE and "feeder" in err


def test_flex_bad_dtheta(tmp_path, capsys):
    code, _, _ = run(capsys, "flex", "table2_feeder", "--dtheta", "7", "--out", str(tmp_path / "x"))
    assert code == EXIT_USAGE


def test_vsm_frozen_corridor(tmp_path, capsys):
    out = tmp_path / "vsm.json"
    code, text, _ = run(capsys, "--json", "vsm", "corridor", "--out", str(out))
    assert code == EXIT_OK
    rep = json.loads(text)
    assert rep["vsm_MW"] == pytest.approx(113.34, rel=0.10)
    assert json.loads(out.read_text())["vsm_MW"] == rep["vsm_MW"]


def test_vsm_flex_beats_frozen(capsys):
    _, frozen, _ = run(capsys, "vsm", "corridor_flex2bus", "--json")
    code, flex, _ = run(capsys, "vsm", "corridor_flex2bus", "--flex", "--json")
    assert code == EXIT_OK
    assert json.loads(flex)["vsm_MW"] > json.loads(frozen)["vsm_MW"]


def test_vsm_contingency_exit_codes(capsys):
    code, _, err = run(capsys, "vsm", "corridor", "--contingency", "l1")
    assert code == EXIT_INFEASIBLE and "islands" in err
    code, _, _ = run(capsys, "vsm", "corridor", "--contingency", "nope")
    assert code == EXIT_USAGE
    code, out, _ = run(capsys, "vsm", "corridor", "--contingency", "all", "--json")
    assert code == EXIT_OK
    assert all("skipped" in r for r in json.loads(out)["contingencies"])


def test_vsm_flex_without_polygon_is_solver_failure(capsys):
    code, _, err = run(capsys, "vsm", "corridor", "--flex")
    assert code == EXIT_SOLVER and "polygon" in err


def test_track(tmp_path, capsys):
    P0, Q0 = cases.pcc_exchange(cases.table2_feeder())
    out = tmp_path / "track.json"
    code, text, _ = run(capsys, "track", "table2_feeder", "--pref", str(P0 - 20), "--qref", str(Q0 - 30),
                        "--out", str(out), "--json")
    assert code == EXIT_OK
    rep = json.loads(text)
    assert rep["distance_MVA"] <= 1e-3
    assert set(rep["setpoints"]) == {"V_d", "tap", "ibg_V", "ibg_P", "ibg_Q"}


def test_simulate(tmp_path, capsys):
    sched = cases.data_path("schedule_table2_ltc.json")
    out = tmp_path / "trace.csv"
    code, text, _ = run(capsys, "simulate", "table2_feeder", "--schedule", str(sched), "--out", str(out),
                        "--json")
    assert code == EXIT_OK
    rep = json.loads(text)
    assert rep["status"] == "quiescent" and rep["dP_j"] < 0
    assert out.read_text().startswith("t_s,tap,V_d")


def test_simulate_missing_schedule(capsys):
    code, _, _ = run(capsys, "simulate", "table2_feeder", "--schedule", "/nonexistent.json")
    assert code == EXIT_USAGE


def test_pv_curve(tmp_path, capsys):
    out = tmp_path / "pv.csv"
    code, text, _ = run(capsys, "pv-curve", "lossless_2bus", "--bus", "load", "--step", "10",
                        "--out", str(out), "--json")
    assert code == EXIT_OK
    assert json.loads(text)["margin_pu"] == pytest.approx(2.7563, rel=1e-3)
    assert out.read_text().splitlines()[0] == "lam,dP_MW,V_load"


def test_pv_curve_unknown_bus(capsys):
    code, _, _ = run(capsys, "pv-curve", "lossless_2bus", "--bus", "zz")
    assert code == EXIT_USAGE


def test_usage_errors(capsys):
    assert run(capsys)[0] == EXIT_USAGE
    assert run(capsys, "frobnicate")[0] == EXIT_USAGE
    assert run(capsys, "vsm", "no_such_case")[0] == EXIT_USAGE
    assert run(capsys, "track", "table2_feeder", "--pref", "1")[0] == EXIT_USAGE


def test_malformed_case_file(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{ not json")
    code, _, err = run(capsys, "vsm", str(bad))
    assert code == EXIT_USAGE and "line 1" in err


def test_plain_text_summary(capsys):
    code, out, _ = run(capsys, "vsm", "lossless_2bus")
    assert code == EXIT_OK
    assert "vsm_MW: 275.62" in out
