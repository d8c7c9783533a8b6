"""Metrics, timing benchmarks and comparison reports.

Per-sample metrics are averaged over the test set:

* ``eta_opt``: ``100 (obj - obj_ref) / obj_ref``.
* ``eta_pg``, ``eta_qg``: share of generator bound checks (lower and upper,
  each its own check) met to 1e-6 p.u.
* ``eta_sl``: share of limited branches whose larger end flow is within
  ``smax + 1e-6``. A case without limited branches scores 100.
* ``eta_pd``, ``eta_qd``: ``100 sum(residual) / sum(|load|)`` with the bus
  balance residual ``generation - load - injection``. Both the signed value
  and the absolute-value aggregate are reported.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from augopf.case import NetworkCase
from augopf.dataset import Dataset, InitialPoint
from augopf.inference import DnnSolution, _case_data, _injections, solve_dnn
from augopf.nn import MlpModel
from augopf.opf import DEFAULT_OPTIONS, SolverOptions, assemble_problem, check_certificate, solve_opf
from augopf.opf.problem import objective_pu
from augopf.powerflow import VoltageProfile, branch_flows
from augopf.twobus import TwoBusLine

SAT_TOL = 1e-6

TABLE_ROWS = (
    ("eta_opt", "eta_opt (%)"),
    ("eta_pg", "eta_PG (%)"),
    ("eta_qg", "eta_QG (%)"),
    ("eta_sl", "eta_Sl (%)"),
    ("eta_pd", "eta_PD (%)"),
    ("eta_qd", "eta_QD (%)"),
    ("t_solver_ms", "t_solver (ms)"),
    ("t_dnn_ms", "t_dnn (ms)"),
    ("speedup", "speedup"),
)


# --------------------------------------------------------------------------
# per-sample metrics

def optimality_gap(obj_dnn: float, obj_ref: float) -> float:
    if not obj_ref > 0:
        raise ValueError(f"reference objective must be positive, got {obj_ref}")
    return 100.0 * (obj_dnn - obj_ref) / obj_ref


def _share_ok(ok: np.ndarray) -> float:
    return 100.0 if ok.size == 0 else 100.0 * float(np.count_nonzero(ok)) / ok.size


def constraint_satisfaction(solution, case: NetworkCase, tol: float = SAT_TOL) -> tuple[float, float, float]:
    """``(eta_pg, eta_qg, eta_sl)`` for one solution, in percent."""
    a = case.arrays
    p = np.asarray(solution.p_g, dtype=float)
    q = np.asarray(solution.q_g, dtype=float)
    if p.shape != (case.n_gen,) or q.shape != (case.n_gen,):
        raise ValueError("generation vectors do not match the case")
    pg_ok = np.concatenate([p >= a.pmin - tol, p <= a.pmax + tol])
    qg_ok = np.concatenate([q >= a.qmin - tol, q <= a.qmax + tol])
    limited = a.smax > 0
    if np.any(limited):
        ff, ft = branch_flows(solution.voltages, case, _case_data(case).y)
        sl_ok = np.maximum(ff, ft)[limited] <= a.smax[limited] + tol
    else:
        sl_ok = np.zeros(0, bool)
    return _share_ok(pg_ok), _share_ok(qg_ok), _share_ok(sl_ok)


def _ratio(res: np.ndarray, load: np.ndarray, signed: bool) -> float:
    total = float(np.sum(np.abs(load)))
    num = float(np.sum(res)) if signed else float(np.sum(np.abs(res)))
    if total == 0.0:
        return 0.0 if not np.any(res) else math.nan
    return 100.0 * num / total


def load_mismatch(solution, load, case: NetworkCase, signed: bool = False) -> tuple[float, float]:
    """``(eta_pd, eta_qd)`` in percent; NaN flags a residual against zero total load."""
    pd, qd = (np.asarray(v, dtype=float) for v in load)
    return (_ratio(np.asarray(solution.residual_p), pd, signed),
            _ratio(np.asarray(solution.residual_q), qd, signed))


def balance_residuals(case: NetworkCase, voltages: VoltageProfile, p_g, q_g, load):
    """``generation - load - injection`` at every bus."""
    a = case.arrays
    pd, qd = (np.asarray(v, dtype=float) for v in load)
    p_inj, q_inj = _injections(_case_data(case), voltages.vm, voltages.va)
    gen_p = np.bincount(a.gen_bus, weights=np.asarray(p_g, dtype=float), minlength=case.n_bus)
    gen_q = np.bincount(a.gen_bus, weights=np.asarray(q_g, dtype=float), minlength=case.n_bus)
    return gen_p - pd - p_inj, gen_q - qd - q_inj


def point_as_solution(case: NetworkCase, point: InitialPoint, load) -> DnnSolution:
    """Wrap a raw primal point (e.g. a solver iterate) for metric evaluation, unclipped."""
    volt = VoltageProfile(np.asarray(point.vm, dtype=float), np.asarray(point.va, dtype=float))
    rp, rq = balance_residuals(case, volt, point.p_g, point.q_g, load)
    return DnnSolution(volt, np.asarray(point.p_g), np.asarray(point.q_g), objective_pu(case, point.p_g), rp, rq)


# --------------------------------------------------------------------------
# reports

@dataclass
class SampleRow:
    index: int
    load_id: int
    objective: float
    reference: float
    eta_opt: float
    eta_pg: float
    eta_qg: float
    eta_sl: float
    eta_pd: float
    eta_qd: float
    eta_pd_abs: float
    eta_qd_abs: float
    clip_events: int
    t_dnn_ms: float | None = None
    t_solver_ms: float | None = None


@dataclass
class EvaluationReport:
    scheme: str
    dataset: str
    sample_count: int
    eta_opt: float
    eta_pg: float
    eta_qg: float
    eta_sl: float
    eta_pd: float                      # signed
    eta_qd: float
    eta_pd_abs: float
    eta_qd_abs: float
    t_solver_ms: float | None = None
    t_dnn_ms: float | None = None
    speedup: float | None = None
    rows: list[SampleRow] = field(default_factory=list, repr=False)

    def metrics(self) -> dict:
        d = asdict(self)
        d.pop("rows")
        return d


def _mean(values) -> float:
    v = np.asarray([x for x in values if x is not None], dtype=float)
    v = v[np.isfinite(v)]
    return float(v.mean()) if v.size else math.nan


def summarize(rows: list[SampleRow], scheme: str, dataset: str) -> EvaluationReport:
    if not rows:
        raise ValueError("empty test set")
    ts = [r.t_solver_ms for r in rows if r.t_solver_ms is not None]
    td = [r.t_dnn_ms for r in rows if r.t_dnn_ms is not None]
    t_solver = float(np.mean(ts)) if ts else None
    t_dnn = float(np.mean(td)) if td else None
    speedup = t_solver / t_dnn if t_solver is not None and t_dnn else None
    return EvaluationReport(
        scheme, dataset, len(rows),
        *(_mean(getattr(r, k) for r in rows) for k in
          ("eta_opt", "eta_pg", "eta_qg", "eta_sl", "eta_pd", "eta_qd", "eta_pd_abs", "eta_qd_abs")),
        t_solver_ms=t_solver, t_dnn_ms=t_dnn, speedup=speedup, rows=rows)


def _row(case, i, load_id, sol, load, ref, t_dnn=None, t_solver=None) -> SampleRow:
    pg, qg, sl = constraint_satisfaction(sol, case)
    pd_s, qd_s = load_mismatch(sol, load, case, signed=True)
    pd_a, qd_a = load_mismatch(sol, load, case)
    gap = optimality_gap(sol.objective, ref) if np.isfinite(ref) and ref > 0 else math.nan
    return SampleRow(i, load_id, float(sol.objective), float(ref), gap, pg, qg, sl, pd_s, qd_s, pd_a, qd_a,
                     len(sol.clip_events), t_dnn, t_solver)


def reference_start(case: NetworkCase) -> np.ndarray:
    """Box midpoints with flat angles."""
    a = case.arrays
    return np.concatenate([(a.pmin + a.pmax) / 2, (a.qmin + a.qmax) / 2, (a.vmin + a.vmax) / 2,
                           np.zeros(case.n_bus)])


def reference_objectives(case: NetworkCase, ds: Dataset, options: SolverOptions = DEFAULT_OPTIONS) -> dict:
    """Objective per load id from a box-midpoint start; NaN where that solve fails."""
    out = {}
    x0 = reference_start(case)
    for lid in np.unique(ds.load_ids):
        row = ds.data[np.flatnonzero(ds.load_ids == lid)[0]]
        res = solve_opf(assemble_problem(case, (row["pd"], row["qd"])), x0, options)
        out[int(lid)] = res.objective if res.converged else math.nan
    return out


def _references(case, ds, options) -> np.ndarray:
    ref = ds.data["objective"].astype(float).copy()
    need = ~ds.converged
    if np.any(need):
        table = reference_objectives(case, ds.select(need), options)
        ref[need] = [table[int(l)] for l in ds.load_ids[need]]
    return ref


def benchmark(model: MlpModel | None, test: Dataset, case: NetworkCase,
              options: SolverOptions = DEFAULT_OPTIONS, time_solver: bool = True, time_dnn: bool = True,
              solver_samples: int | None = None, scheme: str | None = None,
              dataset: str | None = None) -> EvaluationReport:
    """Evaluate a network (or, with ``model=None``, the stored solver points) on ``test``.

    The solver timing is a cold solve from each record's own initial point.
    Converged records use their stored objective as the reference; the
    others use a box-midpoint solve of the same load.
    """
    if len(test) == 0:
        raise ValueError("empty test set")
    scheme = scheme or ("solver" if model is None else model.info.get("scheme", "dnn"))
    dataset = dataset or str(test.meta.get("tag", "test"))
    refs = _references(case, test, options)
    rows = []
    for i, rec in enumerate(test):
        load = (rec.pd, rec.qd)
        if model is None:
            sol = point_as_solution(case, rec.solution, load)
            t_dnn = None
        else:
            sol = solve_dnn(case, load, rec.x0, model)
            t_dnn = sol.latency_us / 1e3 if time_dnn else None
        t_solver = None
        if time_solver and (solver_samples is None or i < solver_samples):
            t0 = time.perf_counter()
            solve_opf(assemble_problem(case, load), rec.x0.vector(), options)
            t_solver = (time.perf_counter() - t0) * 1e3
        rows.append(_row(case, i, rec.load_id, sol, load, refs[i], t_dnn, t_solver))
    return summarize(rows, scheme, dataset)


def parallel_best_of(model: MlpModel, case: NetworkCase, load, initial_points, workers: int = 1) -> DnnSolution:
    """Least-cost network solution over several initial points; ties go to the lowest index."""
    pts = list(initial_points)
    if not pts:
        raise ValueError("need at least one initial point")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            sols = list(pool.map(lambda x0: solve_dnn(case, load, x0, model), pts))
    else:
        sols = [solve_dnn(case, load, x0, model) for x0 in pts]
    best = min(range(len(sols)), key=lambda k: (sols[k].objective, k))
    return sols[best]


def audit_solver(case: NetworkCase, ds: Dataset, options: SolverOptions = DEFAULT_OPTIONS) -> dict:
    """Re-solve every record and run the KKT certificate on the converged ones."""
    n = conv = cert = 0
    worst_feas = worst_comp = 0.0
    for rec in ds:
        load = (rec.pd, rec.qd)
        out = solve_opf(assemble_problem(case, load), rec.x0.vector(), options)
        n += 1
        if out.converged:
            conv += 1
            rep = check_certificate(case, load, out)
            cert += rep.ok
            worst_feas = max(worst_feas, rep.balance, rep.bounds, rep.branch)
            worst_comp = max(worst_comp, rep.complementarity)
    return {"records": n, "converged": conv, "certified": cert,
            "convergence_rate": 100.0 * conv / n if n else math.nan,
            "certified_rate": 100.0 * cert / conv if conv else math.nan,
            "worst_feasibility": worst_feas, "worst_complementarity": worst_comp}


# --------------------------------------------------------------------------
# study bundle

@dataclass
class StudyColumn:
    scheme: str                      # column heading, e.g. "augmented", "baseline", "solver"
    dataset: str                     # dataset heading, e.g. "balanced"
    test: Dataset
    model: MlpModel | None = None    # None evaluates the stored solver points
    subset: str = "all"              # all | converged | nonconverged

    def records(self) -> Dataset:
        if self.subset == "converged":
            return self.test.select(self.test.converged)
        if self.subset == "nonconverged":
            return self.test.select(~self.test.converged)
        if self.subset != "all":
            raise ValueError(f"unknown subset {self.subset!r}")
        return self.test


def _fmt(v, spec: str = ".4g") -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return "-"
    return format(v, spec)


def _speedup(v: float) -> str:
    return "x" + _fmt(v, ".0f" if v >= 100 else ".3g")


def format_table(reports: list[EvaluationReport]) -> str:
    head = ["metric"] + [r.dataset for r in reports]
    sub = [""] + [r.scheme for r in reports]
    body = []
    for key, label in TABLE_ROWS:
        cells = []
        for r in reports:
            v = getattr(r, key)
            cells.append("-" if v is None else (_speedup(v) if key == "speedup" else _fmt(v, ".3f")))
        body.append([label] + cells)
    body.append(["samples"] + [str(r.sample_count) for r in reports])
    rows = [head, sub] + body
    widths = [max(len(row[c]) for row in rows) for c in range(len(head))]
    lines = [" | ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(2, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metrics_csv(reports: list[EvaluationReport], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "scheme", "dataset", "value"])
        for r in reports:
            for key, val in r.metrics().items():
                if key in ("scheme", "dataset"):
                    continue
                w.writerow([key, r.scheme, r.dataset, _cell(val)])


def write_samples_csv(reports: list[EvaluationReport], path: Path) -> None:
    names = list(SampleRow.__dataclass_fields__)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "dataset"] + names)
        for r in reports:
            for row in r.rows:
                w.writerow([r.scheme, r.dataset] + [_cell(getattr(row, k)) for k in names])


def two_bus_curve(case: NetworkCase, q_values, models: dict[str, MlpModel],
                  starts: dict[str, InitialPoint]) -> list[dict]:
    """Bus-2 magnitude against its reactive load: analytic roots and model predictions.

    Baseline models are queried once per point; augmented models once per
    named start.
    """
    line = TwoBusLine.from_case(case)
    other = 1 - case.slack
    a = case.arrays
    rows = []
    for q in np.asarray(q_values, dtype=float):
        pd, qd = a.pd.copy(), a.qd.copy()
        qd[other] = q
        hi, lo = line.roots(q, pd[other])
        low_cost, high_cost = line.branch_voltages(q, pd[other])
        row = {"qd": float(q), "root_high": float(hi), "root_low": float(lo),
               "branch_low_cost": float(low_cost), "branch_high_cost": float(high_cost)}
        for name, model in models.items():
            if model.d_in == 2 * case.n_bus:
                row[name] = float(solve_dnn(case, (pd, qd), None, model).voltages.vm[other])
            else:
                for sname, x0 in starts.items():
                    row[f"{name}_{sname}"] = float(solve_dnn(case, (pd, qd), x0, model).voltages.vm[other])
        rows.append(row)
    return rows


def write_rows_csv(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(v) for k, v in r.items()})


def run_study(case: NetworkCase, columns: list[StudyColumn], out_dir: str | Path,
              options: SolverOptions = DEFAULT_OPTIONS, timing: bool = True,
              solver_samples: int | None = None, curve: list[dict] | None = None) -> list[EvaluationReport]:
    """Evaluate every column and write ``metrics.csv``, ``samples.csv``, ``table.txt`` (and ``curve.csv``).

    With ``timing=False`` every written file is a pure function of the inputs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for col in columns:
        ds = col.records()
        if len(ds) == 0:
            raise ValueError(f"column {col.scheme}/{col.dataset}: empty test set")
        reports.append(benchmark(col.model, ds, case, options, time_solver=timing and col.subset != "nonconverged",
                                 time_dnn=timing, solver_samples=solver_samples, scheme=col.scheme,
                                 dataset=col.dataset))
    write_metrics_csv(reports, out / "metrics.csv")
    write_samples_csv(reports, out / "samples.csv")
    (out / "table.txt").write_text(format_table(reports), encoding="utf-8")
    if curve:
        write_rows_csv(curve, out / "curve.csv")
    return reports
