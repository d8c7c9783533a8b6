import math
import re
from dataclasses import replace
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from augopf.case import (
    Branch, Bus, BusType, CaseError, Generator, NetworkCase, bundled_cases, from_per_unit, parse_case,
    serialize_case, to_per_unit, validate_case,
)

TWO_BUS_TEXT = """
mpc.baseMVA = 100;
mpc.bus = [
    1 3 0 0 0 0 1 1 0 230 1 1.1 0.9;
    2 1 50 10 0 0 1 1 0 230 1 1.1 0.9;
];
mpc.gen = [
    1 0 0 100 -100 1 100 1 200 0;
];
mpc.branch = [
    1 2 0 0.25 0 0 0 0 0 0 1 -360 360;
];
mpc.gencost = [
    2 0 0 3 0.01 10 0;
];
"""


def test_parse_two_bus_text():
    case = parse_case(TWO_BUS_TEXT, name="t")
    assert case.n_bus == 2 and case.n_branch == 1
    assert case.branches[0].x == 0.25 and case.branches[0].r == 0
    assert case.summary().startswith("2 buses, 1 branch")


def test_bundled_fixture_matches_documented_completion(two_bus):
    assert (two_bus.n_bus, two_bus.n_branch, two_bus.n_gen) == (2, 1, 2)
    assert two_bus.branches[0].x == 0.25
    assert two_bus.buses[1].default_pd == 343.0
    assert two_bus.arrays.vmin[0] == two_bus.arrays.vmax[0] == 0.9


def test_case39_counts_match_file(case39):
    text = (resources.files("augopf.cases") / "case39.m").read_text()

    def rows(table):
        body = re.search(rf"mpc\.{table}\s*=\s*\[(.*?)\]", text, re.S).group(1)
        return [ln for ln in body.splitlines() if ln.split("%")[0].strip()]

    assert case39.n_bus == len(rows("bus")) == 39
    assert case39.n_gen == len(rows("gen"))
    assert case39.n_branch == len(rows("branch"))


def test_bundled_cases_listed():
    assert {"case2_bistable", "case39"} <= set(bundled_cases())


@pytest.mark.parametrize("text, message", [
    ("mpc.bus = [\n];", "no buses"),
    (TWO_BUS_TEXT.replace("1 2 0 0.25", "1 7 0 0.25"), "missing bus 7"),
    (TWO_BUS_TEXT.replace("2 1 50 10", "1 1 50 10"), "duplicate bus id 1"),
    (TWO_BUS_TEXT.replace("1 3 0 0", "1 1 0 0"), "no slack bus"),
])
def test_parse_errors(text, message):
    with pytest.raises(CaseError, match=message):
        parse_case(text)


def test_syntax_error_reports_line():
    bad = TWO_BUS_TEXT.replace("2 1 50 10", "2 1 5x0 10")
    with pytest.raises(CaseError) as info:
        parse_case(bad)
    assert info.value.line == 5


def test_non_finite_number_rejected():
    with pytest.raises(CaseError):
        parse_case(TWO_BUS_TEXT.replace("2 1 50 10", "2 1 NaN 10"))


def test_out_of_service_rows_removed():
    text = TWO_BUS_TEXT.replace("mpc.gen = [\n", "mpc.gen = [\n    2 0 0 10 -10 1 100 0 50 0;\n")
    text = text.replace("2 0 0 3 0.01 10 0;", "2 0 0 3 0 5 0;\n    2 0 0 3 0.01 10 0;")
    case = parse_case(text)
    assert case.n_gen == 1 and case.generators[0].cost_c1 == 10


def test_validate_reports_each_violation(two_bus):
    assert validate_case(two_bus).ok
    bad_bus = replace(two_bus.buses[1], v_min=1.2, v_max=1.0)
    case = replace(two_bus, buses=(two_bus.buses[0], bad_bus))
    rep = validate_case(case)
    assert len(rep.violations) == 1 and "bus 2" in rep.violations[0]


def test_validate_flags_disconnected_bus(two_bus):
    extra = Bus(id=2, bus_type=BusType.PQ, v_min=0.9, v_max=1.1)
    case = replace(two_bus, buses=two_bus.buses + (extra,), external_ids=(1, 2, 3))
    rep = validate_case(case)
    assert len(rep.violations) == 1 and "disconnected" in rep.violations[0]


def test_per_unit_conversion():
    assert to_per_unit(100.0, 343.0) == pytest.approx(3.43)
    assert to_per_unit(100.0, 0.0) == 0.0
    assert from_per_unit(100.0, to_per_unit(100.0, 57.3)) == 57.3
    with pytest.raises(ValueError):
        to_per_unit(0.0, 1.0)


@given(st.floats(-1e6, 1e6, allow_nan=False), st.sampled_from([1.0, 10.0, 100.0, 1000.0]))
def test_per_unit_round_trip(mw, base):
    assert math.isclose(from_per_unit(base, to_per_unit(base, mw)), mw, rel_tol=1e-15, abs_tol=1e-300)


def test_serialize_round_trip_bundled(two_bus, case39):
    for case in (two_bus, case39):
        assert parse_case(serialize_case(case), name=case.name) == case


finite = st.floats(-500, 500, allow_nan=False, allow_infinity=False)
positive = st.floats(0.01, 5, allow_nan=False)


@st.composite
def random_cases(draw):
    n = draw(st.integers(2, 6))
    buses = []
    for i in range(n):
        lo = draw(st.floats(0.5, 1.0))
        buses.append(Bus(id=i, bus_type=BusType.SLACK if i == 0 else draw(st.sampled_from([BusType.PQ, BusType.PV])),
                         v_min=lo, v_max=lo + draw(st.floats(0, 0.5)), base_kv=draw(st.floats(1, 500)),
                         shunt_g=draw(finite), shunt_b=draw(finite), default_pd=draw(finite),
                         default_qd=draw(finite)))
    branches = [Branch(from_bus=i, to_bus=i + 1, r=draw(st.floats(0, 0.1)), x=draw(positive),
                       b_charging=draw(st.floats(0, 1)), tap_ratio=draw(st.floats(0.9, 1.1)),
                       s_max=draw(st.floats(0, 1000))) for i in range(n - 1)]
    gens = []
    for _ in range(draw(st.integers(1, 3))):
        p = draw(st.floats(0, 300))
        q = draw(st.floats(-300, 300))
        gens.append(Generator(bus=draw(st.integers(0, n - 1)), p_min=p, p_max=p + draw(st.floats(0, 300)),
                              q_min=q, q_max=q + draw(st.floats(0, 300)), cost_c2=draw(st.floats(0, 1)),
                              cost_c1=draw(st.floats(0, 100)), cost_c0=draw(st.floats(0, 100))))
    ids = draw(st.lists(st.integers(1, 10_000), min_size=n, max_size=n, unique=True))
    return NetworkCase(base_mva=draw(st.sampled_from([10.0, 100.0, 250.0])), buses=tuple(buses),
                       branches=tuple(branches), generators=tuple(gens), name="rand", external_ids=tuple(ids))


@settings(max_examples=60, deadline=None)
@given(random_cases())
def test_round_trip_property(case):
    assert validate_case(case).ok
    again = parse_case(serialize_case(case), name="rand")
    assert again == case
    # renumbering is a bijection
    assert sorted(again.internal_index(e) for e in again.external_ids) == list(range(case.n_bus))


def test_arrays_are_per_unit(two_bus):
    a = two_bus.arrays
    assert a.pd[1] == pytest.approx(3.43)
    assert a.pmax[1] == pytest.approx(2.83)
    assert not a.pd.flags.writeable
    np.testing.assert_array_equal(a.gen_bus, [0, 1])
