import math
from dataclasses import replace

import numpy as np
import pytest

from augopf.case import parse_case
from augopf.dataset import InitialPoint, initial_point_stream
from augopf.inference import (
    DnnSolution, assemble_input, infer_dataset, post_process, predict_voltages, reconstruct, solution_from_voltages,
    solve_dnn,
)
from augopf.nn import Scaler
from augopf.opf import assemble_problem, check_certificate, solve_opf
from augopf.powerflow import VoltageProfile, build_admittance, bus_injections
from augopf.twobus import TwoBusLine


def test_assemble_input_layout(two_bus):
    load = (np.array([0.0, 3.43]), np.array([0.0, 0.3]))
    x0 = InitialPoint(np.array([0.5, 2.0]), np.array([0.1, 0.0]), np.array([0.9, 0.8]), np.array([0.0, -0.2]))
    feat = assemble_input(load, x0)
    np.testing.assert_array_equal(feat, np.concatenate([load[0], load[1], x0.vector()]))
    assert np.array_equal(feat, assemble_input(load, x0))
    assert assemble_input(load, None, augmented=False).size == 4
    mean_only = Scaler(feat, np.ones(feat.size))
    np.testing.assert_array_equal(assemble_input(load, x0, mean_only)[:4], 0.0)
    with pytest.raises(ValueError):
        assemble_input(load, x0, Scaler(np.zeros(3), np.ones(3)))
    with pytest.raises(ValueError):
        assemble_input(load, None)


def test_reconstruct_inverts_certified_solution(case39):
    problem = assemble_problem(case39)
    out = solve_opf(problem, initial_point_stream(case39, 0, 0, 0, 0.05).vector())
    assert out.converged and check_certificate(case39, (problem.pd, problem.qd), out).ok
    p_g, q_g, rp, rq = reconstruct(case39, out.voltages, (problem.pd, problem.qd))
    np.testing.assert_allclose(p_g, out.p_g, atol=1e-6)
    np.testing.assert_allclose(q_g, out.q_g, atol=1e-6)
    assert np.max(np.abs(rp)) < 1e-6 and np.max(np.abs(rq)) < 1e-6


def test_flat_voltages_give_generation_equal_load():
    case = parse_case("""
mpc.baseMVA = 100;
mpc.bus = [
    1 3 20 5 0 0 1 1 0 230 1 1.1 0.9;
    2 1 50 10 0 0 1 1 0 230 1 1.1 0.9;
    3 2 30 -4 0 0 1 1 0 230 1 1.1 0.9;
];
mpc.gen = [
    1 0 0 100 -100 1 100 1 200 0;
    3 0 0 100 -100 1 100 1 300 0;
    3 0 0 100 -100 1 100 1 100 0;
];
mpc.branch = [
    1 2 0 0.25 0 0 0 0 0 0 1 -360 360;
    2 3 0 0.20 0 0 0 0 0 0 1 -360 360;
];
mpc.gencost = [
    2 0 0 3 0 10 0;
    2 0 0 3 0 10 0;
    2 0 0 3 0 10 0;
];
""")
    a = case.arrays
    p_g, q_g, rp, rq = reconstruct(case, VoltageProfile.flat(3), (a.pd, a.qd))
    # bus 3 splits 0.3 p.u. by capacity range 300:100, and the equal q ranges share -0.04 evenly
    np.testing.assert_allclose(p_g, [0.2, 0.225, 0.075])
    np.testing.assert_allclose(q_g, [0.05, -0.02, -0.02])
    np.testing.assert_allclose(rp, [0.0, -0.5, 0.0])
    np.testing.assert_allclose(rq, [0.0, -0.1, 0.0])


def test_two_bus_generation_is_injection_plus_load(two_bus):
    volt = VoltageProfile([0.9, 0.9], [0.0, -math.pi / 6])
    load = (np.array([0.0, 3.43]), np.array([0.0, 0.3]))
    p_inj, q_inj = bus_injections(volt, build_admittance(two_bus))
    p_g, q_g, _, _ = reconstruct(two_bus, volt, load)
    # bus 2 has one unit (Qg2 range 0 -> equal split, still a single unit)
    assert p_g[1] == pytest.approx(p_inj[1] + 3.43, abs=1e-12)
    assert p_inj[1] == pytest.approx(-1.62, abs=5e-5)
    assert q_g[1] == pytest.approx(q_inj[1] + 0.3, abs=1e-12)


def test_post_process_examples(two_bus):
    volt = VoltageProfile([0.9, 0.85], [0.0, -0.1])
    ok = DnnSolution(volt, np.array([0.5, 2.0]), np.array([0.0, 0.0]), 0.0, np.zeros(2), np.zeros(2))
    same = post_process(ok, two_bus)
    assert same.clip_events == () and np.array_equal(same.p_g, ok.p_g)
    over = replace(ok, p_g=np.array([0.5, 2.83 + 0.05]))
    fixed = post_process(over, two_bus)
    assert fixed.p_g[1] == pytest.approx(2.83)
    assert len(fixed.clip_events) == 1 and fixed.clip_events[0][:2] == ("p_g", 1)
    assert fixed.clip_events[0][2] == pytest.approx(-0.05)
    assert fixed.residual_p[1] == pytest.approx(-0.05)
    again = post_process(fixed, two_bus)
    assert again.clip_events == fixed.clip_events and np.array_equal(again.p_g, fixed.p_g)


def test_solution_from_voltages_always_inside_boxes(two_bus):
    rng = np.random.default_rng(0)
    a = two_bus.arrays
    for _ in range(200):
        volt = VoltageProfile([0.9, rng.uniform(0.3, 1.1)], [0.0, rng.uniform(-1.5, 1.5)])
        sol = solution_from_voltages(two_bus, volt, (a.pd, np.array([0.0, rng.uniform(0.1, 0.6)])))
        assert np.all((a.pmin <= sol.p_g) & (sol.p_g <= a.pmax))
        assert np.all((a.qmin <= sol.q_g) & (sol.q_g <= a.qmax))


def test_solve_dnn_repeatable_and_in_boxes(two_bus, one_load, one_load_model):
    rec = one_load.record(0)
    a = solve_dnn(two_bus, (rec.pd, rec.qd), rec.x0, one_load_model)
    b = solve_dnn(two_bus, (rec.pd, rec.qd), rec.x0, one_load_model)
    assert a.voltages == b.voltages and a.objective == b.objective
    assert a.latency_us > 0
    arr = two_bus.arrays
    assert np.all((arr.vmin <= a.voltages.vm) & (a.voltages.vm <= arr.vmax))


def test_trained_model_follows_branch_of_initial_point(two_bus, one_load, one_load_model):
    high, capped = TwoBusLine.from_case(two_bus).branch_voltages(0.3)
    hits = {"low_cost": 0, "high_cost": 0}
    for rec in one_load:
        if rec.branch_label is None:
            continue
        sol = solve_dnn(two_bus, (rec.pd, rec.qd), rec.x0, one_load_model)
        target = float(high) if rec.branch_label == "low_cost" else float(capped)
        assert sol.voltages.vm[1] == pytest.approx(target, abs=2e-2)
        hits[rec.branch_label] += 1
    assert min(hits.values()) > 0


def test_batch_file_mode(two_bus, one_load, one_load_model, tmp_path):
    path = tmp_path / "out.csv"
    rows = infer_dataset(two_bus, one_load.select(slice(0, 5)), one_load_model, path)
    assert len(rows) == 5 and "latency_us" in rows[0]
    assert len(path.read_text().splitlines()) == 6
    pred = predict_voltages(two_bus, one_load_model, one_load.select(slice(0, 5)))
    np.testing.assert_allclose(pred.vm[:, 1], [r["vm1"] for r in rows], rtol=0, atol=1e-12)
