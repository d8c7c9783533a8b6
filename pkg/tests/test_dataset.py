import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from augopf.dataset import (
    SCALE_FLOOR, BranchRule, Dataset, LoadCurve, classify_branch, generate_dataset, initial_point_stream,
    input_features, mix_dataset, output_targets, sample_initial_point, scaler_stats, split_dataset,
    sweep_load_profile, synth_load_profile,
)
from augopf.evaluation import audit_solver
from augopf.opf import SolverOptions
from augopf.twobus import TwoBusLine


@pytest.fixture(scope="module")
def sweep_ds(two_bus):
    profile = sweep_load_profile(two_bus, 1, np.linspace(0.1, 0.6, 6))
    return generate_dataset(two_bus, profile, 12, seed=3, angle_range=math.pi / 2, rule=BranchRule(bus=1))


def test_daily_profile_size_and_span(case39):
    prof = synth_load_profile(case39, 2760, granularity_s=30.0)
    assert len(prof) == 2760
    assert prof.span_hours() == pytest.approx(23.0, abs=0.01)
    assert np.all(prof.pd[:, case39.arrays.pd > 0] > 0)


def test_constant_profile_is_default_load(case39):
    prof = synth_load_profile(case39, 5, "constant")
    np.testing.assert_array_equal(prof.pd, np.tile(case39.arrays.pd, (5, 1)))
    np.testing.assert_array_equal(prof.qd, np.tile(case39.arrays.qd, (5, 1)))


def test_profile_deterministic_per_seed(case39):
    a = synth_load_profile(case39, 50, jitter=0.02, seed=4)
    b = synth_load_profile(case39, 50, jitter=0.02, seed=4)
    c = synth_load_profile(case39, 50, jitter=0.02, seed=5)
    np.testing.assert_array_equal(a.pd, b.pd)
    assert not np.array_equal(a.pd, c.pd)


def test_curve_rejects_non_positive_values():
    with pytest.raises(ValueError):
        LoadCurve((0.0, 24.0), (1.0, 0.0))
    with pytest.raises(ValueError):
        LoadCurve((0.0, 12.0), (1.0, 1.0))


def test_scale_range_rescales_daily_curve(case39):
    prof = synth_load_profile(case39, 2880, scale_range=(0.8, 1.05))
    ratio = prof.pd[:, 2] / case39.arrays.pd[2]
    assert ratio.min() == pytest.approx(0.8) and ratio.max() == pytest.approx(1.05)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 10_000), st.integers(0, 100), st.floats(0.01, 3.0))
def test_initial_points_inside_boxes(two_bus, seed, k, j, angle):
    for case in (two_bus,):
        p = initial_point_stream(case, seed, k, j, angle)
        a = case.arrays
        assert np.all((a.pmin <= p.p_g) & (p.p_g <= a.pmax))
        assert np.all((a.qmin <= p.q_g) & (p.q_g <= a.qmax))
        assert np.all((a.vmin <= p.vm) & (p.vm <= a.vmax))
        assert np.all(np.abs(p.va) <= angle) and p.va[case.slack] == 0.0
        # degenerate boxes are hit exactly
        assert p.q_g[1] == 0.0 and p.vm[0] == 0.9
        assert np.array_equal(initial_point_stream(case, seed, k, j, angle).vector(), p.vector())


def test_sample_initial_point_uses_rng(case39):
    a = sample_initial_point(case39, np.random.default_rng(1))
    b = sample_initial_point(case39, np.random.default_rng(1))
    np.testing.assert_array_equal(a.vector(), b.vector())


def test_generate_counts_and_flags(sweep_ds):
    assert len(sweep_ds) == 6 * 12
    counts = sweep_ds.counts()
    assert counts["loads"] == 6
    assert 0 < counts["converged"] < len(sweep_ds)
    # non-convergent records stay, without labels
    assert np.all(sweep_ds.labels[~sweep_ds.converged] == -1)
    assert counts["low_cost"] > 0 and counts["high_cost"] > 0


def test_constant_profile_single_draw(case39):
    ds = generate_dataset(case39, synth_load_profile(case39, 2, "constant"), 1, seed=0, angle_range=0.05)
    assert len(ds) == 2
    np.testing.assert_array_equal(ds.data["pd"][0], ds.data["pd"][1])
    assert not np.array_equal(ds.data["x0"][0], ds.data["x0"][1])


def test_k_init_must_be_positive(two_bus):
    with pytest.raises(ValueError):
        generate_dataset(two_bus, sweep_load_profile(two_bus, 1, [0.2]), 0, seed=0)


def test_regeneration_byte_identical(two_bus, sweep_ds):
    profile = sweep_load_profile(two_bus, 1, np.linspace(0.1, 0.6, 6))
    again = generate_dataset(two_bus, profile, 12, seed=3, angle_range=math.pi / 2, rule=BranchRule(bus=1))
    assert again.to_bytes() == sweep_ds.to_bytes()


def test_worker_count_does_not_change_output(two_bus):
    profile = sweep_load_profile(two_bus, 1, [0.2, 0.4])
    one = generate_dataset(two_bus, profile, 4, seed=1, angle_range=math.pi / 2)
    two = generate_dataset(two_bus, profile, 4, seed=1, angle_range=math.pi / 2, workers=2)
    assert one.to_bytes() == two.to_bytes()


def test_converged_records_certified(two_bus, sweep_ds):
    audit = audit_solver(two_bus, sweep_ds)
    assert audit["converged"] == int(sweep_ds.converged.sum())
    assert audit["certified"] == audit["converged"]


def test_labels_follow_analytic_branches(two_bus, sweep_ds):
    line = TwoBusLine.from_case(two_bus)
    for rec in sweep_ds:
        if not rec.converged:
            continue
        high, capped = line.branch_voltages(rec.qd[1])
        v = rec.solution.vm[1]
        expected = "low_cost" if abs(v - high) < 1e-6 else "high_cost" if abs(v - capped) < 1e-6 else None
        assert rec.branch_label == expected
        assert classify_branch(two_bus, rec, BranchRule(bus=1)) == expected


def test_dead_band_leaves_unlabelled(two_bus):
    pd = two_bus.arrays.pd
    qd = np.array([0.0, 0.3])
    cut = BranchRule(bus=1).cut(two_bus, pd, qd)
    rule = BranchRule(bus=1, threshold=cut, dead_band=1e-3)
    assert rule.label(two_bus, pd, qd, [0.9, cut]) is None
    assert rule.label(two_bus, pd, qd, [0.9, cut + 5e-4]) is None
    assert rule.label(two_bus, pd, qd, [0.9, cut + 0.01]) == "low_cost"
    assert rule.label(two_bus, pd, qd, [0.9, cut - 0.01]) == "high_cost"


def test_only_analytic_branches_are_labelled(two_bus):
    rule = BranchRule(bus=1)
    pd = two_bus.arrays.pd
    qd = np.array([0.0, 0.3])
    high, capped = TwoBusLine.from_case(two_bus).branch_voltages(0.3)
    assert rule.label(two_bus, pd, qd, [0.9, float(high)]) == "low_cost"
    assert rule.label(two_bus, pd, qd, [0.9, float(capped)]) == "high_cost"
    # a stationary point the solver can also reach: the line's maximum-transfer point
    assert rule.label(two_bus, pd, qd, [0.9, 0.57446]) is None
    assert BranchRule(bus=1, threshold=0.6).label(two_bus, pd, qd, [0.9, 0.57446]) == "high_cost"


def test_file_round_trip(sweep_ds, tmp_path):
    path = tmp_path / "d.augds"
    digest = sweep_ds.save(path)
    back = Dataset.load(path)
    assert back.to_bytes() == sweep_ds.to_bytes() and digest == back.digest()
    text = sweep_ds.to_csv()
    again = Dataset.from_csv(text, sweep_ds.case_name, sweep_ds.n_bus, sweep_ds.n_gen, sweep_ds.meta)
    assert again.to_bytes() == sweep_ds.to_bytes()


def test_corrupt_file_rejected(sweep_ds, tmp_path):
    raw = sweep_ds.to_bytes()
    with pytest.raises(ValueError, match="magic"):
        Dataset.from_bytes(b"X" + raw[1:])
    with pytest.raises(ValueError, match="truncated"):
        Dataset.from_bytes(raw[:-3])


@pytest.mark.parametrize("ratio", [(1, 1), (9, 1), (1, 0), (2, 1)])
def test_mix_exact_per_load_ratio(sweep_ds, ratio):
    mixed = mix_dataset(sweep_ds, ratio, drop_incomplete=True)
    a, b = ratio
    for lid in np.unique(mixed.load_ids):
        lab = mixed.labels[mixed.load_ids == lid]
        low, high = int((lab == 0).sum()), int((lab == 1).sum())
        assert low * b == high * a and low + high > 0
    assert mixed.meta["mix_ratio"] == [a, b]


def test_mix_missing_branch_raises(sweep_ds):
    with pytest.raises(ValueError, match="lacks records"):
        mix_dataset(sweep_ds, (40, 1))
    with pytest.raises(ValueError):
        mix_dataset(sweep_ds, (0, 0))


def test_split_by_load(case39):
    ds = generate_dataset(case39, synth_load_profile(case39, 100, "constant"), 1, seed=0, angle_range=0.0,
                          options=SolverOptions(max_iter=0))
    train, test = split_dataset(ds, 0.8, seed=7, slack=case39.slack)
    tl, sl = set(train.load_ids), set(test.load_ids)
    assert len(tl) == 80 and len(sl) == 20 and not tl & sl and tl | sl == set(range(100))
    again, _ = split_dataset(ds, 0.8, seed=7, slack=case39.slack)
    assert np.array_equal(again.load_ids, train.load_ids)
    with pytest.raises(ValueError):
        split_dataset(ds, 0.999)
    with pytest.raises(ValueError):
        split_dataset(ds, 1.0)


def test_scalers_from_train_converged_only(two_bus, sweep_ds):
    train, test = split_dataset(sweep_ds, 0.5, seed=1, slack=two_bus.slack)
    fit = train.select(train.converged)
    stored = train.meta["scalers"]
    assert stored == test.meta["scalers"]
    assert stored["input"] == scaler_stats(input_features(fit, True))
    assert stored["output"] == scaler_stats(output_targets(fit, two_bus.slack))


def test_scale_floor():
    x = np.array([[1.0, 5.0], [1.0 + 1e-9, 7.0]])
    s = scaler_stats(x)
    assert s["scale"][0] == SCALE_FLOOR and s["scale"][1] == pytest.approx(1.0)
