import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adnflex import cases
from adnflex.control import (
    ControlSchedule,
    LtcCommand,
    SetpointCommand,
    indirect_shed,
    load_schedule,
    qss_simulate,
    simulate_many,
    track_setpoint,
)
from adnflex.flex import corner_polygon, feasibility_probe
from adnflex.netmodel import CaseError
from adnflex.powerflow import Network, PowerFlowError, solve_powerflow


@pytest.fixture(scope="module")
def anchor(table2):
    return cases.pcc_exchange(table2)


@pytest.fixture(scope="module")
def lowered(table2):
    sched = load_schedule(cases.data_path("schedule_table2_ltc.json"))
    return sched, qss_simulate(table2, sched, 600)


# tracking ---------------------------------------------------------------


def test_tracking_anchor_is_identity(table2, table2_opf, anchor):
    res = track_setpoint(table2_opf, SetpointCommand(*anchor))
    assert res.distance <= 1e-6
    assert res.adjustment == pytest.approx((0.0, 0.0), abs=1e-5)
    base = table2_opf.base_pt
    assert res.setpoints.tap["ltc"] == pytest.approx(table2.transformers[0].tap, abs=1e-6)
    assert res.setpoints.ibg_V["ibg"] == pytest.approx(float(base.vm[2]), abs=1e-6)


def test_reachable_command_is_met(table2_opf, anchor):
    res = track_setpoint(table2_opf, SetpointCommand.from_adjustment(*anchor, -20.0, -30.0))
    assert res.distance <= 1e-3
    assert res.adjustment == pytest.approx((-20.0, -30.0), abs=1e-3)


@pytest.mark.parametrize("cmd", [(0.0, 150.0), (0.0, 1000.0), (-100.0, 0.0), (60.0, -120.0)])
def test_far_command_lands_on_nearest_boundary_point(table2_opf, table2_corners, anchor, cmd):
    poly = corner_polygon(table2_corners)
    res = track_setpoint(table2_opf, SetpointCommand.from_adjustment(*anchor, *cmd))
    assert math.dist(res.adjustment, poly.project(*cmd)) <= 0.005 * poly.diameter
    assert res.distance == pytest.approx(math.dist(res.adjustment, cmd), rel=1e-6)
    assert res.binding


def test_feeder30_reference_command(feeder30):
    P0, Q0 = cases.pcc_exchange(feeder30)
    res = track_setpoint(feeder30, SetpointCommand.from_adjustment(P0, Q0, -10.09, -15.05))
    # just outside the synthetic feeder's region: the boundary point is returned
    assert 0.0 < res.distance < 1.0
    assert feasibility_probe(feeder30, *res.adjustment, tol_MVA=1e-3)
    assert res.to_dict()["distance_MVA"] == res.distance


def _table2_controls(table2, tap, v_g):
    case = table2.with_transformer("ltc", tap=tap).with_ibg("ibg", V_set=v_g)
    net = Network(case)
    try:
        pt = solve_powerflow(net, None, {"lam": 0.0})
    except PowerFlowError:
        return None
    if any(not b.V_min - 1e-9 <= v <= b.V_max + 1e-9 for b, v in zip(case.buses, pt.vm)):
        return None
    return cases.pcc_exchange(case, pt)


@pytest.mark.parametrize("cmd", [(0.0, 150.0), (-100.0, 0.0), (-20.0, -30.0)])
def test_no_sampled_control_beats_tracking(table2, table2_opf, anchor, cmd):
    target = (anchor[0] + cmd[0], anchor[1] + cmd[1])
    best = track_setpoint(table2_opf, SetpointCommand(*target)).distance
    sampled = 0
    for tap in np.linspace(0.9, 1.1, 20):
        for v_g in np.linspace(0.95, 1.05, 10):
            pq = _table2_controls(table2, float(tap), float(v_g))
            if pq is None:
                continue
            sampled += 1
            assert best <= math.dist(pq, target) + 1e-3
    assert sampled >= 20


# quasi-steady-state simulation --------------------------------------------


def test_noop_schedule_keeps_base_case(table2, anchor):
    trace = qss_simulate(table2, ControlSchedule(), 60)
    assert trace.status == "quiescent"
    assert trace.ramp_seconds == 0.0
    for s in trace.samples:
        assert (s.P_j, s.Q_j) == pytest.approx(anchor, abs=1e-8)
        assert s.taps == trace.first.taps


def test_lowered_deadband_steps_taps(table2, lowered):
    sched, trace = lowered
    assert trace.status == "quiescent" and not trace.tap_exhausted
    cmd = sched.ltc["ltc"]
    taps = [s.taps["ltc"] for s in trace.samples]
    assert all(b >= a for a, b in zip(taps, taps[1:]))  # raising the ratio lowers V_d
    assert taps[-1] > taps[0]
    assert abs(trace.last.V["d"] - cmd.V_set) <= cmd.deadband_half
    assert trace.last.V["d"] < trace.first.V["d"]
    assert trace.dP_j < 0
    # first step after the 30 s delay, the rest 10 s apart
    steps = [s.t for a, s in zip(trace.samples, trace.samples[1:]) if s.taps != a.taps]
    assert steps[0] == 30.0 and np.allclose(np.diff(steps), 10.0)


def test_samples_satisfy_balance(lowered):
    _, trace = lowered
    assert max(s.mismatch for s in trace.samples) <= 1e-8
    ts = [s.t for s in trace.samples]
    assert ts == sorted(ts) and ts[0] == 0.0


def test_exhausted_tap_range_is_flagged(table2):
    tr = table2.transformers[0]
    case = table2.with_transformer("ltc", tap_max=tr.tap + 0.02)
    sched = ControlSchedule({"ltc": LtcCommand(0.95, 0.01)})
    trace = qss_simulate(case, sched, 600)
    assert trace.tap_exhausted == ["ltc"]
    assert trace.last.V["d"] > 0.96
    assert trace.last.taps["ltc"] <= tr.tap + 0.02 + 1e-12


def test_ramp_of_two_percent_takes_forty_seconds(table2):
    v0 = table2.ibgs[0].V_set
    trace = qss_simulate(table2, ControlSchedule(ramps={"ibg": v0 + 0.02}), 600)
    assert trace.ramp_seconds == 40.0
    assert trace.status == "quiescent" and trace.last.t == 40.0
    assert trace.last.ibg["ibg"][0] == pytest.approx(v0 + 0.02, abs=1e-9)
    q = [s.ibg["ibg"][2] for s in trace.samples]
    assert all(b > a for a, b in zip(q, q[1:]))


def test_ramp_waits_for_first_tap(table2):
    v0 = table2.ibgs[0].V_set
    sched = ControlSchedule({"ltc": LtcCommand(0.95, 0.01)}, {"ibg": v0 - 0.01})
    trace = qss_simulate(table2, sched, 600)
    vg = [s.ibg["ibg"][0] for s in trace.samples]
    first_move = next(s.t for s, v in zip(trace.samples, vg) if abs(v - v0) > 1e-12)
    assert first_move == 30.0
    assert trace.ramp_seconds == 20.0


def test_simulate_many_matches_serial(table2, lowered):
    sched, trace = lowered
    runs = simulate_many([(table2, sched), (table2, ControlSchedule())], 600, workers=2)
    assert [s.P_j for s in runs[0].samples] == [s.P_j for s in trace.samples]
    assert runs[1].status == "quiescent"


def test_trace_csv(lowered):
    _, trace = lowered
    rows = trace.to_csv().splitlines()
    assert rows[0] == "t_s,tap,V_d,V_g[ibg],P_g[ibg],Q_g[ibg],P_j,Q_j"
    assert len(rows) == len(trace.samples) + 1


# indirect load shedding -----------------------------------------------------


def test_indirect_shed_examples():
    assert indirect_shed(600.0, 1.0, 0.99, 0.95, 1.0) == pytest.approx(24.0)
    assert indirect_shed(600.0, 1.0, 0.99, 0.99, 1.0) == 0.0
    with pytest.raises(ValueError):
        indirect_shed(600.0, 0.0, 0.99, 0.95, 1.0)


@given(st.floats(1.0, 1000.0), st.floats(0.8, 1.2), st.floats(0.8, 1.2), st.floats(0.0, 3.0))
@settings(max_examples=100, deadline=None)
def test_indirect_shed_is_load_model_difference(P, V_d, V_fin, a):
    # shedding relative to the current voltage equals the exponential-load drop
    direct = P - P * (V_fin / V_d) ** a
    assert indirect_shed(P, V_d, V_d, V_fin, a) == pytest.approx(direct, rel=1e-9, abs=1e-9)


def test_indirect_shed_matches_ltc_only_trace(table2, lowered):
    _, trace = lowered
    ld = table2.loads[0]
    assert ld.a == 1.0
    P0 = trace.first.loads[ld.id][0]
    V0, V1 = trace.first.V[ld.bus], trace.last.V[ld.bus]
    shed = indirect_shed(P0, V0, V0, V1, ld.a)
    assert shed == pytest.approx(-trace.load_change(ld.id), rel=1e-6)
    assert shed == pytest.approx(-trace.dP_j, rel=0.02)


# schedules ---------------------------------------------------------------


def test_schedule_round_trip(tmp_path):
    sched = ControlSchedule({"ltc": LtcCommand(0.97, 0.005)}, {"ibg": 1.02}, 0.001)
    path = tmp_path / "s.json"
    path.write_text(json.dumps(sched.to_dict()))
    assert load_schedule(path) == sched


def test_schedule_from_tracking_setpoints(table2, table2_opf, anchor):
    res = track_setpoint(table2_opf, SetpointCommand.from_adjustment(*anchor, -20.0, -30.0))
    sched = ControlSchedule.from_setpoints(res.setpoints, table2)
    assert sched.ltc["ltc"].V_set == pytest.approx(res.setpoints.V_d["d"])
    assert sched.ramps == res.setpoints.ibg_V
    sched.validate(table2)


def test_schedule_validation(table2, tmp_path):
    with pytest.raises(ValueError):
        ControlSchedule(ramp_rate=0.0)
    with pytest.raises(ValueError):
        ControlSchedule({"ltc": LtcCommand(1.0, 0.0)})
    with pytest.raises(CaseError, match="unknown transformer"):
        ControlSchedule({"t9": LtcCommand(1.0, 0.01)}).validate(table2)
    with pytest.raises(CaseError, match="outside bus limits"):
        ControlSchedule({"ltc": LtcCommand(0.9, 0.01)}).validate(table2)
    with pytest.raises(CaseError, match="unknown IBG"):
        ControlSchedule(ramps={"x": 1.0}).validate(table2)
    with pytest.raises(CaseError, match="unknown keys"):
        ControlSchedule.from_dict({"ltc": {}, "extra": 1})
    bad = tmp_path / "bad.json"
    bad.write_text('{\n"ltc": {\n}\n,,}')
    with pytest.raises(CaseError, match="line 4"):
        load_schedule(bad)
