import math

import numpy as np
import pytest

from augopf.case import parse_case
from augopf.dataset import InitialPoint, generate_dataset, initial_point_stream, synth_load_profile
from augopf.evaluation import (
    TABLE_ROWS, SampleRow, StudyColumn, benchmark, constraint_satisfaction, format_table, load_mismatch,
    optimality_gap, parallel_best_of, point_as_solution, run_study, summarize,
)
from augopf.inference import DnnSolution, solve_dnn
from augopf.opf import SolverOptions, assemble_problem, check_certificate, solve_opf
from augopf.powerflow import VoltageProfile
from augopf.twobus import TwoBusLine


def test_optimality_gap_examples():
    assert optimality_gap(100, 100) == 0.0
    assert optimality_gap(91.44, 100) == pytest.approx(-8.56)
    assert optimality_gap(100.48, 100) == pytest.approx(0.48)
    for bad in (0.0, -5.0, math.nan):
        with pytest.raises(ValueError):
            optimality_gap(1.0, bad)


def two_bus_solution(p_g, q_g=(0.0, 0.0), vm2=0.85, residual=(0.0, 0.0)):
    volt = VoltageProfile([0.9, vm2], [0.0, -0.3])
    res = np.asarray(residual, dtype=float)
    return DnnSolution(volt, np.asarray(p_g, float), np.asarray(q_g, float), 0.0, res, res)


def test_satisfaction_examples(two_bus):
    assert constraint_satisfaction(two_bus_solution([0.6, 2.83]), two_bus) == (100.0, 100.0, 100.0)
    # four active checks (two units, lower and upper), one broken
    pg, qg, sl = constraint_satisfaction(two_bus_solution([0.6, 2.9]), two_bus)
    assert pg == 75.0 and qg == 100.0
    # the only branch is unlimited
    assert sl == 100.0
    # within tolerance still counts as met
    assert constraint_satisfaction(two_bus_solution([0.6, 2.83 + 5e-7]), two_bus)[0] == 100.0
    with pytest.raises(ValueError):
        constraint_satisfaction(two_bus_solution([0.6, 2.83, 0.0]), two_bus)


def test_branch_limit_share():
    case = parse_case("""
mpc.baseMVA = 100;
mpc.bus = [
    1 3 0 0 0 0 1 1 0 230 1 1.1 0.9;
    2 1 50 0 0 0 1 1 0 230 1 1.1 0.9;
];
mpc.gen = [ 1 0 0 100 -100 1 100 1 200 0; ];
mpc.branch = [
    1 2 0 0.1 0 10 0 0 0 0 1 -360 360;
    1 2 0 0.1 0 900 0 0 0 0 1 -360 360;
];
mpc.gencost = [ 2 0 0 3 0 10 0; ];
""")
    sol = DnnSolution(VoltageProfile([1.0, 1.0], [0.0, -0.05]), np.array([0.5]), np.array([0.0]), 0.0,
                      np.zeros(2), np.zeros(2))
    # each line carries about 0.5 p.u.: over the 0.1 limit, under the 9.0 one
    assert constraint_satisfaction(sol, case)[2] == 50.0


def test_mismatch_examples(two_bus):
    pd, qd = np.array([1.0, 3.43]), np.array([0.5, 0.3])
    sol = DnnSolution(VoltageProfile([0.9, 0.9], [0.0, 0.0]), np.zeros(2), np.zeros(2), 0.0, 0.1 * pd, 0.1 * qd)
    assert load_mismatch(sol, (pd, qd), two_bus) == pytest.approx((10.0, 10.0))
    under = DnnSolution(sol.voltages, sol.p_g, sol.q_g, 0.0, -0.1 * pd, 0.1 * qd)
    assert load_mismatch(under, (pd, qd), two_bus, signed=True) == pytest.approx((-10.0, 10.0))
    assert load_mismatch(under, (pd, qd), two_bus) == pytest.approx((10.0, 10.0))
    zero = np.zeros(2)
    flat = DnnSolution(sol.voltages, zero, zero, 0.0, zero, zero)
    assert load_mismatch(flat, (zero, zero), two_bus) == (0.0, 0.0)
    off = DnnSolution(sol.voltages, zero, zero, 0.0, np.array([0.0, 0.1]), zero)
    p, q = load_mismatch(off, (zero, zero), two_bus)
    assert math.isnan(p) and q == 0.0


def row(t_solver, t_dnn):
    return SampleRow(0, 0, 1.0, 1.0, 0.0, 100.0, 100.0, 100.0, 0.0, 0.0, 0.0, 0.0, 0, t_dnn, t_solver)


def test_speedup_arithmetic():
    rep = summarize([row(1621.0, 1.4)], "augmented", "balanced")
    assert rep.speedup == pytest.approx(1157.857, abs=1e-3)
    assert "x1158" in format_table([rep])
    assert summarize([row(2.0, 2.0)], "a", "b").speedup == 1.0
    # the ratio is of the means, not the mean of ratios
    two = summarize([row(10.0, 1.0), row(30.0, 4.0)], "a", "b")
    assert two.speedup == pytest.approx(20.0 / 2.5)
    dnn_only = summarize([row(None, 1.4)], "a", "b")
    assert dnn_only.speedup is None and dnn_only.t_solver_ms is None
    speed_line = next(line for line in format_table([dnn_only]).splitlines() if line.startswith("speedup"))
    assert speed_line.split("|")[1].strip() == "-"
    with pytest.raises(ValueError):
        summarize([], "a", "b")


def test_certified_solution_scores_perfectly(case39):
    prof = synth_load_profile(case39, 3, scale_range=(0.85, 1.0), seed=1)
    for k in range(3):
        load = (prof.pd[k], prof.qd[k])
        out = solve_opf(assemble_problem(case39, load), initial_point_stream(case39, 0, k, 0, 0.05).vector())
        assert out.converged and check_certificate(case39, load, out).ok
        sol = point_as_solution(case39, InitialPoint(out.p_g, out.q_g, out.voltages.vm, out.voltages.va), load)
        assert optimality_gap(sol.objective, out.objective) == pytest.approx(0.0, abs=1e-10)
        assert constraint_satisfaction(sol, case39) == (100.0, 100.0, 100.0)
        assert max(abs(v) for v in load_mismatch(sol, load, case39)) <= 1e-4


def test_best_of_examples(two_bus, one_load, one_load_model):
    load = (one_load.data["pd"][0], one_load.data["qd"][0])
    starts = {lab: next(r.x0 for r in one_load if r.branch_label == lab) for lab in ("low_cost", "high_cost")}
    single = parallel_best_of(one_load_model, two_bus, load, [starts["high_cost"]])
    direct = solve_dnn(two_bus, load, starts["high_cost"], one_load_model)
    assert single.voltages == direct.voltages
    twice = parallel_best_of(one_load_model, two_bus, load, [starts["high_cost"]] * 2)
    assert twice.voltages == single.voltages
    best = parallel_best_of(one_load_model, two_bus, load, [starts["high_cost"], starts["low_cost"]])
    high, _ = TwoBusLine.from_case(two_bus).branch_voltages(0.3)
    assert best.voltages.vm[1] == pytest.approx(float(high), abs=2e-2)
    with pytest.raises(ValueError):
        parallel_best_of(one_load_model, two_bus, load, [])


def test_best_of_never_worse_than_any_member(two_bus, one_load, one_load_model):
    load = (one_load.data["pd"][0], one_load.data["qd"][0])
    pts = [rec.x0 for rec in one_load.select(slice(0, 12))]
    best = parallel_best_of(one_load_model, two_bus, load, pts)
    assert all(best.objective <= solve_dnn(two_bus, load, x0, one_load_model).objective for x0 in pts)
    threaded = parallel_best_of(one_load_model, two_bus, load, pts, workers=3)
    assert threaded.voltages == best.voltages


def test_benchmark_of_stored_solver_points(two_bus, one_load):
    conv = one_load.select(one_load.converged)
    rep = benchmark(None, conv, two_bus, time_solver=False)
    assert rep.scheme == "solver" and rep.sample_count == len(conv)
    assert rep.eta_opt == pytest.approx(0.0, abs=1e-12)
    assert rep.eta_pg == rep.eta_qg == rep.eta_sl == 100.0
    assert rep.t_solver_ms is None and rep.speedup is None
    with pytest.raises(ValueError):
        benchmark(None, one_load.select(slice(0, 0)), two_bus)


def test_run_study_files_and_repeatability(two_bus, one_load, one_load_model, tmp_path):
    test = one_load.select(slice(0, 10))
    cols = [StudyColumn("augmented", "balanced", test, one_load_model), StudyColumn("solver", "balanced", test)]
    a = run_study(two_bus, cols, tmp_path / "a", timing=False)
    run_study(two_bus, cols, tmp_path / "b", timing=False)
    for name in ("metrics.csv", "samples.csv", "table.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    table = (tmp_path / "a" / "table.txt").read_text()
    for _, label in TABLE_ROWS:
        assert label in table
    assert [r.sample_count for r in a] == [10, 10]
    metrics = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "metric,scheme,dataset,value"
    empty = [StudyColumn("solver", "balanced", test.select(test.converged), subset="nonconverged")]
    with pytest.raises(ValueError, match="empty"):
        run_study(two_bus, empty, tmp_path / "c", timing=False)


def test_nonconverged_records_use_midpoint_reference(case39):
    prof = synth_load_profile(case39, 2, scale_range=(0.9, 1.0), seed=2)
    ds = generate_dataset(case39, prof, 1, seed=0, angle_range=0.05, options=SolverOptions(max_iter=0))
    assert not np.any(ds.converged)
    rep = benchmark(None, ds, case39, time_solver=False)
    assert all(np.isfinite(r.reference) and r.reference > 0 for r in rep.rows)
