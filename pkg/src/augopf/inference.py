"""Predict-and-reconstruct: network voltages -> injections -> generation -> boxes.

Generation at bus ``i`` follows from the balance equations::

    P_G,i = p_inj,i + P_D,i        Q_G,i = q_inj,i + Q_D,i

Several units at one bus share the bus total in proportion to their range
``max - min``, or equally when every range is zero. Buses without units
keep a residual ``p_inj + P_D``, which is the unserved or over-served load.
Clipping generation into its box moves the clipped amount into the residual
of that bus.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from augopf.case import NetworkCase
from augopf.dataset import Dataset, InitialPoint, input_features
from augopf.nn import MlpModel, decode, forward
from augopf.opf.problem import objective_pu
from augopf.powerflow import AdmittanceMatrix, VoltageProfile, build_admittance


@dataclass(frozen=True, eq=False)
class DnnSolution:
    voltages: VoltageProfile
    p_g: np.ndarray
    q_g: np.ndarray
    objective: float
    residual_p: np.ndarray          # per bus, generation - load - injection
    residual_q: np.ndarray
    clip_events: tuple = ()         # (variable, generator index, signed adjustment)
    latency_us: float = 0.0


@dataclass(frozen=True, eq=False)
class _CaseData:
    case: NetworkCase
    y: AdmittanceMatrix
    rows: np.ndarray
    cols: np.ndarray
    g: np.ndarray
    b: np.ndarray
    share_p: np.ndarray             # (ng,) fraction of the bus total given to each unit
    share_q: np.ndarray
    has_gen: np.ndarray


_CACHE: dict[int, _CaseData] = {}


def _shares(bus: np.ndarray, rng: np.ndarray, nb: int) -> np.ndarray:
    tot = np.bincount(bus, weights=rng, minlength=nb)
    cnt = np.bincount(bus, minlength=nb).astype(float)
    return np.where(tot[bus] > 0, rng / np.where(tot[bus] > 0, tot[bus], 1.0), 1.0 / cnt[bus])


def _case_data(case: NetworkCase) -> _CaseData:
    hit = _CACHE.get(id(case))
    if hit is not None and hit.case is case:
        return hit
    a = case.arrays
    y = build_admittance(case)
    coo = y.ybus.tocoo()
    nb = case.n_bus
    data = _CaseData(case, y, coo.row.copy(), coo.col.copy(), coo.data.real.copy(), coo.data.imag.copy(),
                     _shares(a.gen_bus, a.pmax - a.pmin, nb), _shares(a.gen_bus, a.qmax - a.qmin, nb),
                     np.bincount(a.gen_bus, minlength=nb) > 0)
    if len(_CACHE) > 16:
        _CACHE.clear()
    _CACHE[id(case)] = data
    return data


def _injections(cd: _CaseData, vm: np.ndarray, va: np.ndarray):
    i, j = cd.rows, cd.cols
    th = va[i] - va[j]
    w = vm[i] * vm[j]
    c, s = np.cos(th), np.sin(th)
    n = vm.size
    p = np.bincount(i, weights=w * (cd.g * c + cd.b * s), minlength=n)
    q = np.bincount(i, weights=w * (cd.g * s - cd.b * c), minlength=n)
    return p, q


def assemble_input(load, x0: InitialPoint | np.ndarray | None, scaler=None, augmented: bool = True) -> np.ndarray:
    """``[pd | qd]`` (+ ``x0`` when augmented), then scaled if a scaler is given."""
    pd, qd = (np.asarray(v, dtype=float) for v in load)
    parts = [pd, qd]
    if augmented:
        if x0 is None:
            raise ValueError("augmented input needs an initial point")
        parts.append(x0.vector() if isinstance(x0, InitialPoint) else np.asarray(x0, dtype=float))
    feat = np.concatenate(parts)
    if scaler is not None:
        if scaler.mean.shape != feat.shape:
            raise ValueError(f"scaler has {scaler.mean.size} features, input has {feat.size}")
        feat = scaler.transform(feat)
    return feat


def reconstruct(case: NetworkCase, voltages: VoltageProfile, load):
    """Generation implied by ``voltages`` plus the per-bus residuals.

    Returns ``(p_g, q_g, residual_p, residual_q)``. Residuals are zero at
    buses with units.
    """
    if np.any(voltages.vm <= 0):
        raise ValueError("voltage magnitudes must be positive")
    cd = _case_data(case)
    pd, qd = (np.asarray(v, dtype=float) for v in load)
    p, q = _injections(cd, voltages.vm, voltages.va)
    a = case.arrays
    bus_p = p + pd
    bus_q = q + qd
    p_g = bus_p[a.gen_bus] * cd.share_p
    q_g = bus_q[a.gen_bus] * cd.share_q
    res_p = np.where(cd.has_gen, 0.0, -bus_p)
    res_q = np.where(cd.has_gen, 0.0, -bus_q)
    return p_g, q_g, res_p, res_q


def post_process(sol: DnnSolution, case: NetworkCase) -> DnnSolution:
    """Clip generation (and, as an audit, magnitudes) into their boxes."""
    a = case.arrays
    events = list(sol.clip_events)
    res_p = sol.residual_p.copy()
    res_q = sol.residual_q.copy()
    out = {}
    for name, val, lo, hi, res in (("p_g", sol.p_g, a.pmin, a.pmax, res_p), ("q_g", sol.q_g, a.qmin, a.qmax, res_q)):
        clipped = np.clip(val, lo, hi)
        delta = clipped - val
        for k in np.flatnonzero(delta):
            events.append((name, int(k), float(delta[k])))
        np.add.at(res, a.gen_bus, delta)
        out[name] = clipped
    vm = np.clip(sol.voltages.vm, a.vmin, a.vmax)
    dv = vm - sol.voltages.vm
    for k in np.flatnonzero(dv):
        events.append(("vm", int(k), float(dv[k])))
    volt = sol.voltages if not np.any(dv) else VoltageProfile(vm, sol.voltages.va)
    return replace(sol, voltages=volt, p_g=out["p_g"], q_g=out["q_g"], residual_p=res_p, residual_q=res_q,
                   objective=objective_pu(case, out["p_g"]), clip_events=tuple(events))


def is_augmented(model: MlpModel, case: NetworkCase) -> bool:
    nb, nx = case.n_bus, 2 * case.n_gen + 2 * case.n_bus
    if model.d_in == 2 * nb + nx:
        return True
    if model.d_in == 2 * nb:
        return False
    raise ValueError(f"model input size {model.d_in} fits neither layout for this case")


def voltages_from_output(case: NetworkCase, y: np.ndarray) -> VoltageProfile:
    nb = case.n_bus
    va = np.insert(y[nb:], case.slack, 0.0)
    return VoltageProfile(y[:nb].copy(), va)


def solve_dnn(case: NetworkCase, load, x0, model: MlpModel) -> DnnSolution:
    """Full DNN path; ``latency_us`` covers scaling through post-processing."""
    t0 = time.perf_counter()
    aug = is_augmented(model, case)
    feat = assemble_input(load, x0, model.input_scaler, augmented=aug)
    y = decode(model, forward(model, feat))
    volt = voltages_from_output(case, y)
    p_g, q_g, rp, rq = reconstruct(case, volt, load)
    sol = post_process(DnnSolution(volt, p_g, q_g, float("nan"), rp, rq), case)
    return replace(sol, latency_us=(time.perf_counter() - t0) * 1e6)


def solution_from_voltages(case: NetworkCase, voltages: VoltageProfile, load) -> DnnSolution:
    """Treat given voltages (e.g. a solver's) as a network prediction."""
    p_g, q_g, rp, rq = reconstruct(case, voltages, load)
    return post_process(DnnSolution(voltages, p_g, q_g, float("nan"), rp, rq), case)


def infer_dataset(case: NetworkCase, ds: Dataset, model: MlpModel, path: str | Path | None = None) -> list[dict]:
    """Batch file mode: one solution row per dataset record, with latency."""
    rows = []
    for i, rec in enumerate(ds):
        sol = solve_dnn(case, (rec.pd, rec.qd), rec.x0, model)
        row = {"index": i, "load_id": rec.load_id, "objective": sol.objective, "latency_us": sol.latency_us,
               "clip_events": len(sol.clip_events)}
        row.update({f"vm{k}": v for k, v in enumerate(sol.voltages.vm)})
        row.update({f"va{k}": v for k, v in enumerate(sol.voltages.va)})
        row.update({f"pg{k}": v for k, v in enumerate(sol.p_g)})
        row.update({f"qg{k}": v for k, v in enumerate(sol.q_g)})
        rows.append(row)
    if path is not None and rows:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return rows


@dataclass
class Predictions:
    """Vectorized predictions for many records (no per-call latency)."""

    vm: np.ndarray
    va: np.ndarray
    extra: dict = field(default_factory=dict)


def predict_voltages(case: NetworkCase, model: MlpModel, ds: Dataset) -> Predictions:
    aug = is_augmented(model, case)
    y = decode(model, forward(model, model.input_scaler.transform(input_features(ds, aug))))
    nb = case.n_bus
    va = np.insert(y[:, nb:], case.slack, 0.0, axis=1)
    return Predictions(y[:, :nb], va)
