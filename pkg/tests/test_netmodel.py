import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adnflex import cases
from adnflex.netmodel import (
    CaseError,
    case_from_dict,
    case_to_dict,
    dumps_case,
    from_pu,
    load_case,
    save_case,
    to_pu,
    validate_case,
)

from conftest import random_case


def _write(tmp_path, doc, name="case.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc) if not isinstance(doc, str) else doc)
    return p


def test_table2_feeder_file_loads(tmp_path):
    p = tmp_path / "t2.json"
    save_case(cases.table2_feeder(), p)
    case = load_case(p)
    assert len(case.branches) == 1 and len(case.transformers) == 1
    br, tr = case.branches[0], case.transformers[0]
    assert br.R == pytest.approx(0.004413333) and br.X == pytest.approx(0.0608)
    assert tr.X_t == pytest.approx(0.0015)
    assert validate_case(case) == []


def test_corridor_file_has_two_identical_halves():
    case = load_case(cases.data_path("corridor.json"))
    assert [b.id for b in case.buses] == ["src", "mid", "load"]
    l1, l2 = case.branches
    assert (l1.R, l1.X) == (l2.R, l2.X) == (0.05, 0.2)
    assert case.generators[0].V_ref == 1.05


def test_empty_bus_list_is_rejected(tmp_path):
    doc = case_to_dict(cases.lossless_2bus())
    doc["buses"] = []
    doc["branches"] = []
    doc["generators"] = []
    doc["stress"] = None
    with pytest.raises(CaseError, match="no slack bus"):
        load_case(_write(tmp_path, doc))


def test_missing_base_is_rejected(tmp_path):
    doc = case_to_dict(cases.lossless_2bus())
    del doc["base_MVA"]
    with pytest.raises(CaseError, match="base_MVA"):
        load_case(_write(tmp_path, doc))


def test_dangling_bus_reference(tmp_path):
    doc = case_to_dict(cases.lossless_2bus())
    doc["branches"][0]["to"] = "nowhere"
    with pytest.raises(CaseError, match="nowhere"):
        load_case(_write(tmp_path, doc))


def test_parse_error_reports_line(tmp_path):
    p = _write(tmp_path, '{\n  "name": "x",\n  "base_MVA": 100,\n  oops\n}')
    with pytest.raises(CaseError, match="line 4"):
        load_case(p)


def test_unnormalised_participation_factors():
    case = cases.lossless_2bus().with_generator("th", w=0.9)
    assert "participation factors not normalized" in validate_case(case)


def test_degenerate_tap_range():
    case = cases.table2_feeder().with_transformer("ltc", tap_min=1.0, tap_max=1.0)
    assert any("degenerate tap range" in f for f in validate_case(case))


@pytest.mark.parametrize("name", sorted(p.name for p in cases.DATA_DIR.glob("*.json")
                                        if not p.name.startswith("schedule")))
def test_shipped_cases_round_trip(name, tmp_path):
    case = load_case(cases.data_path(name))
    assert validate_case(case) == []
    p = tmp_path / name
    save_case(case, p)
    again = load_case(p)
    assert again == case
    assert dumps_case(again) == dumps_case(case)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_case_round_trip(seed):
    case = random_case(np.random.default_rng(seed))
    assert case_from_dict(json.loads(dumps_case(case))) == case


@given(st.floats(-1e6, 1e6, allow_nan=False), st.floats(1.0, 1e4))
def test_per_unit_conversion_is_involutive(value, base):
    assert from_pu(to_pu(value, base), base) == pytest.approx(value, rel=1e-12, abs=1e-12)
