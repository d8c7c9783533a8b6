"""Command-line entry point: ``augopf {parse,generate,train,evaluate,solve}``.

Exit codes: 0 success, 2 configuration error, 3 data error (missing or
invalid files), 4 numerical failure (solver did not converge, training
diverged).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from augopf import __version__
from augopf.case import CaseError, NetworkCase, load_case, to_per_unit, validate_case
from augopf.config import ConfigError, config_digest, dump_config, load_config
from augopf.dataset import (
    BranchRule, Dataset, InitialPoint, generate_dataset, mix_dataset, split_dataset, sweep_load_profile,
    synth_load_profile,
)
from augopf.evaluation import (
    StudyColumn, audit_solver, parallel_best_of, reference_start, run_study, two_bus_curve,
)
from augopf.inference import solve_dnn
from augopf.nn import CheckpointError, TrainConfig, TrainingDiverged, load_model, save_model
from augopf.opf import SolverOptions, assemble_problem, solve_opf
from augopf.training import fit_model

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("augopf")


class DataError(RuntimeError):
    pass


class NumericalFailure(RuntimeError):
    pass


# --------------------------------------------------------------------------
# helpers

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_provenance(out: Path, cfg: dict, extra: dict | None = None) -> None:
    """Resolved config plus sha256 of every file in ``out``."""
    (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    files = {p.name: _sha256(p) for p in sorted(out.iterdir()) if p.is_file() and p.name != "digests.json"}
    info = {"config_digest": config_digest(cfg), "version": __version__, "files": files, **(extra or {})}
    (out / "digests.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _case(ref: str) -> NetworkCase:
    try:
        case = load_case(ref)
    except FileNotFoundError as exc:
        raise DataError(f"case not found: {ref}") from exc
    except CaseError as exc:
        raise DataError(f"invalid case {ref}: {exc}") from exc
    report = validate_case(case)
    if not report.ok:
        raise DataError(f"invalid case {ref}:\n{report}")
    return case


def _dataset(path) -> Dataset:
    if path is None:
        raise ConfigError("a dataset path is required")
    p = Path(path)
    if not p.is_file():
        raise DataError(f"dataset not found: {p}")
    try:
        return Dataset.load(p)
    except ValueError as exc:
        raise DataError(f"{p}: {exc}") from exc


def _model(path):
    if path is None:
        raise ConfigError("a model path is required")
    p = Path(path)
    if not p.is_file():
        raise DataError(f"model not found: {p}")
    try:
        return load_model(p)
    except CheckpointError as exc:
        raise DataError(f"{p}: {exc}") from exc


def _solver_options(cfg: dict) -> SolverOptions:
    return SolverOptions(**cfg["solver"])


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve(args, extra: list[tuple[list[str], object]]) -> dict:
    overrides: list = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append((["seed"], args.seed))
    if getattr(args, "workers", None) is not None:
        overrides.append((["workers"], args.workers))
    overrides += [(k, v) for k, v in extra if v is not None]
    return load_config(args.config, overrides)


# --------------------------------------------------------------------------
# subcommands

def cmd_parse(args) -> int:
    case = _case(args.case)
    print(f"{case.name}: {case.summary()}, base {case.base_mva:g} MVA, slack bus {case.external_ids[case.slack]}")
    return EXIT_OK


def build_profile(case: NetworkCase, spec: dict, seed: int = 0):
    kind = spec["kind"]
    if kind == "sweep":
        lo, hi = spec["q_range"]
        bus = case.internal_index(int(spec["bus"]))
        return sweep_load_profile(case, bus, np.linspace(float(lo), float(hi), int(spec["n"])),
                                  granularity_s=float(spec["granularity_s"]))
    sr = spec["scale_range"]
    return synth_load_profile(case, int(spec["n"]), kind, float(spec["jitter"]), seed=seed,
                              granularity_s=float(spec["granularity_s"]),
                              scale_range=None if sr is None else (float(sr[0]), float(sr[1])))


def build_rule(case: NetworkCase, spec: dict | None) -> BranchRule | None:
    if spec is None:
        return None
    return BranchRule(bus=case.internal_index(int(spec["bus"])), threshold=spec.get("threshold", "two_bus_midpoint"),
                      dead_band=float(spec.get("dead_band", 1e-3)), above=spec.get("above", "low_cost"),
                      branch_tol=float(spec.get("branch_tol", 1e-4)))


def cmd_generate(args) -> int:
    cfg = _resolve(args, [(["generate", "k_init"], args.k_init), (["generate", "profile", "n"], args.n)])
    case = _case(cfg["case"])
    g = cfg["generate"]
    profile = build_profile(case, g["profile"], cfg["seed"])
    ds = generate_dataset(case, profile, g["k_init"], cfg["seed"], angle_range=float(g["angle_range"]),
                          rule=build_rule(case, g["rule"]), workers=cfg["workers"], options=_solver_options(cfg),
                          meta={"config_digest": config_digest(cfg)})
    out = _out_dir(args)
    ds.save(out / "dataset.augds")
    if args.csv:
        ds.to_csv(out / "dataset.csv")
    _write_provenance(out, cfg, {"counts": ds.counts()})
    print(f"{len(ds)} records -> {out / 'dataset.augds'} {ds.counts()}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args, [(["train", "dataset"], args.dataset), (["train", "epochs"], args.epochs),
                          (["train", "batch_size"], args.batch_size), (["train", "learning_rate"], args.lr),
                          (["train", "scheme"], args.scheme)])
    t = cfg["train"]
    case = _case(cfg["case"])
    ds = _dataset(t["dataset"])
    if ds.case_name != case.name or ds.n_bus != case.n_bus:
        raise DataError(f"dataset was generated for {ds.case_name}, not {case.name}")
    if t["mix"] is not None:
        try:
            ds = mix_dataset(ds, tuple(t["mix"]), drop_incomplete=bool(t["drop_incomplete"]))
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    train_ds, test_ds = split_dataset(ds, float(t["split"]["train_fraction"]), int(t["split"]["seed"]),
                                      slack=case.slack)
    final_lr = t["final_learning_rate"]
    tc = TrainConfig(batch_size=t["batch_size"], max_epochs=t["epochs"], learning_rate=float(t["learning_rate"]),
                     final_learning_rate=None if final_lr is None else float(final_lr),
                     shuffle_seed=int(t["shuffle_seed"]))
    print(f"training {t['scheme']}: batch {tc.batch_size}, epochs {tc.max_epochs}, lr {tc.learning_rate:g}, "
          f"hidden {list(t['hidden'])}, {int(train_ds.converged.sum())} samples")
    digest = config_digest(cfg)
    try:
        model, history = fit_model(case, train_ds, t["hidden"], t["scheme"] == "augmented", tc,
                                   seed=int(t["init_seed"]), val_fraction=float(t["val_fraction"]),
                                   log_every=int(t["log_every"]), logger=log)
    except TrainingDiverged as exc:
        raise NumericalFailure(str(exc)) from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    model.info["config_digest"] = digest
    out = _out_dir(args)
    save_model(model, out / "model.ckpt", config_digest=digest)
    with open(out / "history.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "val_mse"])
        for h in history:
            w.writerow([h.epoch, repr(h.train_mse), "" if h.val_mse is None else repr(h.val_mse)])
    test_ds.save(out / "test.augds")
    _write_provenance(out, cfg, {"train_counts": train_ds.counts(), "test_counts": test_ds.counts()})
    print(f"checkpoint -> {out / 'model.ckpt'}")
    return EXIT_OK


def _columns(cfg: dict) -> list[StudyColumn]:
    cols = []
    for spec in cfg["evaluate"]["columns"]:
        for key in ("scheme", "dataset", "test"):
            if key not in spec:
                raise ConfigError(f"evaluate.columns entry lacks {key!r}: {spec}")
        model = _model(spec["model"]) if spec.get("model") else None
        if model is None and spec["scheme"] != "solver":
            raise ConfigError(f"column {spec['scheme']}/{spec['dataset']} needs a model path")
        cols.append(StudyColumn(spec["scheme"], spec["dataset"], _dataset(spec["test"]), model,
                                spec.get("subset", "all")))
    return cols


def _curve(cfg: dict, case: NetworkCase):
    spec = cfg["evaluate"]["curve"]
    if not spec:
        return None
    q = np.linspace(float(spec["q_range"][0]), float(spec["q_range"][1]), int(spec.get("n", 101)))
    models = {name: _model(path) for name, path in spec["models"].items()}
    starts = {name: InitialPoint.from_vector(case, v) for name, v in spec.get("starts", {}).items()}
    return two_bus_curve(case, q, models, starts)


def cmd_evaluate(args) -> int:
    cfg = _resolve(args, [(["evaluate", "timing"], False if args.no_timing else None)])
    case = _case(cfg["case"])
    e = cfg["evaluate"]
    out = _out_dir(args)
    options = _solver_options(cfg)
    if e["audit"]:
        ds = _dataset(e["audit"]["dataset"])
        limit = e["audit"].get("limit")
        if limit is not None:
            ds = ds.select(np.arange(min(int(limit), len(ds))))
        res = audit_solver(case, ds, options)
        (out / "audit.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        print(json.dumps(res, sort_keys=True))
    cols = _columns(cfg)
    if not cols and not e["audit"]:
        raise ConfigError("evaluate needs columns or an audit section")
    if cols:
        try:
            run_study(case, cols, out, options, timing=bool(e["timing"]),
                      solver_samples=e["solver_samples"], curve=_curve(cfg, case))
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        print((out / "table.txt").read_text(encoding="utf-8"), end="")
    _write_provenance(out, cfg)
    return EXIT_OK


def read_load_file(case: NetworkCase, path) -> tuple[np.ndarray, np.ndarray]:
    """CSV ``bus,pd,qd`` in MW/MVAr with external bus ids; unlisted buses keep the case load."""
    p = Path(path)
    if not p.is_file():
        raise DataError(f"load file not found: {p}")
    a = case.arrays
    pd, qd = a.pd.copy(), a.qd.copy()
    with open(p, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            try:
                i = case.internal_index(int(row["bus"]))
                pd[i] = to_per_unit(case, float(row["pd"]))
                qd[i] = to_per_unit(case, float(row["qd"]))
            except (KeyError, ValueError) as exc:
                raise DataError(f"{p}: bad row {row}: {exc}") from exc
    return pd, qd


def read_x0_file(case: NetworkCase, path) -> list[InitialPoint]:
    """CSV of primal points ``[pg | qg | vm | va]`` in p.u./rad, one per row, header optional."""
    p = Path(path)
    if not p.is_file():
        raise DataError(f"initial-point file not found: {p}")
    pts = []
    with open(p, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip():
                continue
            try:
                vals = [float(v) for v in row]
            except ValueError:
                if not pts:
                    continue          # header
                raise DataError(f"{p}: non-numeric row {row}")
            try:
                pts.append(InitialPoint.from_vector(case, vals))
            except ValueError as exc:
                raise DataError(f"{p}: {exc}") from exc
    if not pts:
        raise DataError(f"{p}: no initial points")
    return pts


def _solution_record(case, mode, p_g, q_g, vm, va, objective, **extra) -> dict:
    return {"mode": mode, "case": case.name, "objective": objective,
            "p_g_mw": (np.asarray(p_g) * case.base_mva).tolist(), "q_g_mvar": (np.asarray(q_g) * case.base_mva).tolist(),
            "vm": np.asarray(vm).tolist(), "va": np.asarray(va).tolist(), **extra}


def cmd_solve(args) -> int:
    case = _case(args.case)
    load = read_load_file(case, args.load) if args.load else (case.arrays.pd.copy(), case.arrays.qd.copy())
    if args.x0:
        starts = read_x0_file(case, args.x0)
    elif args.mode == "solver":
        starts = [InitialPoint.from_vector(case, reference_start(case))]
    else:
        raise ConfigError(f"mode {args.mode} needs --x0")
    status = EXIT_OK
    if args.mode == "solver":
        out = solve_opf(assemble_problem(case, load), starts[0].vector())
        rec = _solution_record(case, "solver", out.p_g, out.q_g, out.voltages.vm, out.voltages.va, out.objective,
                               converged=out.converged, iterations=out.iterations, kkt_residual=out.kkt_residual,
                               feasibility=out.feasibility, trajectory_digest=out.trajectory_digest,
                               message=out.message)
        if not out.converged:
            status = EXIT_NUMERIC
    else:
        model = _model(args.model)
        if args.mode == "dnn":
            sol = solve_dnn(case, load, starts[0], model)
            extra = {}
        else:
            sol = parallel_best_of(model, case, load, starts)
            extra = {"k": len(starts)}
        rec = _solution_record(case, args.mode, sol.p_g, sol.q_g, sol.voltages.vm, sol.voltages.va, sol.objective,
                               latency_us=sol.latency_us, clip_events=[list(e) for e in sol.clip_events], **extra)
    text = json.dumps(rec, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return status


# --------------------------------------------------------------------------
# argument parsing

def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="YAML run configuration (defaults apply to omitted keys)")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry by dotted key, e.g. train.epochs=10; repeatable")
    p.add_argument("--seed", type=int, help="top-level seed (overrides config)")
    p.add_argument("--workers", type=int, help="worker processes; 1 is the reproducibility reference")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="augopf", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="validate a case file and print a summary")
    p.add_argument("case", help="case file path or bundled case name")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("generate", help="label (load, initial point) pairs with the solver")
    _common(p)
    p.add_argument("--k-init", type=int, help="initial points per load")
    p.add_argument("--n", type=int, help="number of load instances")
    p.add_argument("--csv", action="store_true", help="also write a CSV export")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="split a dataset and train one network")
    _common(p)
    p.add_argument("--dataset", help="dataset file")
    p.add_argument("--scheme", choices=("augmented", "baseline"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="learning rate")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics tables, timing and solver audits")
    _common(p)
    p.add_argument("--no-timing", action="store_true", help="skip wall-clock timing (reproducible reports)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("solve", help="solve one load with the solver, a network, or best-of-k")
    p.add_argument("--case", required=True)
    p.add_argument("--load", help="CSV bus,pd,qd in MW/MVAr (default: the case load)")
    p.add_argument("--x0", help="CSV of initial points, one per row")
    p.add_argument("--mode", choices=("solver", "dnn", "best-of-k"), default="solver")
    p.add_argument("--model", help="checkpoint for dnn and best-of-k modes")
    p.add_argument("--out", help="write the JSON record here instead of stdout")
    p.set_defaults(func=cmd_solve)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
