"""Load profiles, initial points, solver labelling, mixing and splitting.

A dataset is stored column-wise. Row ``i`` holds one ``(load, x0)`` input and
the solver's answer for it. Each record has these fields, in file order:

    load_id | pd (nb) | qd (nb) | x0 (nx) | solution (nx) | objective |
    converged | iterations | label

Vectors are p.u./rad, with ``nx = 2 ng + 2 nb`` in primal order
``[pg | qg | vm | va]``. ``label`` is -1 (none), 0 (low_cost) or 1 (high_cost).

Randomness: the initial point for load ``k``, draw ``j`` comes from
``default_rng([seed, k, j])``. A draw therefore depends only on its position,
never on worker count or scheduling.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from augopf.case import NetworkCase
from augopf.opf import DEFAULT_OPTIONS, SolverOptions, assemble_problem, solve_opf
from augopf.twobus import TwoBusLine

log = logging.getLogger(__name__)

LABELS = {-1: None, 0: "low_cost", 1: "high_cost"}
LABEL_CODES = {None: -1, "low_cost": 0, "high_cost": 1}

MAGIC = b"AUGOPFDS"
FORMAT_VERSION = 1


# --------------------------------------------------------------------------
# load profiles

@dataclass(frozen=True)
class LoadCurve:
    """Piecewise-linear daily multiplier on default load."""

    hours: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.hours) != len(self.values) or len(self.hours) < 2:
            raise ValueError("curve needs matching hours/values with at least two knots")
        if self.hours[0] != 0.0 or self.hours[-1] != 24.0:
            raise ValueError("curve must be defined on [0, 24] hours")
        if min(self.values) <= 0:
            raise ValueError("curve values must be positive")

    def __call__(self, hours) -> np.ndarray:
        return np.interp(np.asarray(hours, dtype=float) % 24.0, self.hours, self.values)

    def rescaled(self, lo: float, hi: float) -> LoadCurve:
        """Affinely map the curve's own range onto ``[lo, hi]``."""
        v = np.asarray(self.values)
        span = v.max() - v.min()
        if span == 0:
            return LoadCurve(self.hours, tuple(float(x) for x in np.full(v.size, lo)))
        return LoadCurve(self.hours, tuple(float(x) for x in lo + (v - v.min()) * (hi - lo) / span))


# 11 knots, 2.4 h apart: overnight trough, midday ramp, evening peak.
DAILY = LoadCurve(
    hours=tuple(2.4 * i for i in range(11)),
    values=(0.86, 0.81, 0.80, 0.88, 0.96, 1.02, 1.07, 1.10, 1.06, 0.95, 0.86),
)
CURVES = {
    "daily": DAILY,
    "constant": LoadCurve((0.0, 24.0), (1.0, 1.0)),
}


@dataclass(frozen=True, eq=False)
class LoadProfile:
    pd: np.ndarray            # (n, nb) p.u.
    qd: np.ndarray
    granularity_s: float = 30.0

    def __len__(self) -> int:
        return self.pd.shape[0]

    def instance(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        return self.pd[k], self.qd[k]

    def span_hours(self) -> float:
        return (len(self) - 1) * self.granularity_s / 3600.0


def synth_load_profile(case: NetworkCase, n: int, curve: str | LoadCurve = "daily", jitter: float = 0.0,
                       seed: int = 0, granularity_s: float = 30.0,
                       scale_range: tuple[float, float] | None = None) -> LoadProfile:
    """Instance ``k`` is the default load times ``curve(k * dt) * (1 + jitter * N(0, 1))``."""
    if n < 1:
        raise ValueError("profile needs n >= 1")
    shape = CURVES[curve] if isinstance(curve, str) else curve
    if scale_range is not None:
        shape = shape.rescaled(*scale_range)
    hours = np.arange(n) * granularity_s / 3600.0
    mult = shape(hours)
    if jitter:
        mult = mult * (1.0 + jitter * np.random.default_rng(seed).standard_normal(n))
    if np.any(mult <= 0):
        raise ValueError("load multiplier became non-positive; reduce jitter")
    a = case.arrays
    return LoadProfile(pd=mult[:, None] * a.pd[None, :], qd=mult[:, None] * a.qd[None, :],
                       granularity_s=granularity_s)


def sweep_load_profile(case: NetworkCase, bus: int, q_values, granularity_s: float = 30.0) -> LoadProfile:
    """Default load with the reactive demand at internal ``bus`` swept over ``q_values`` (p.u.)."""
    q = np.asarray(q_values, dtype=float)
    if q.ndim != 1 or q.size == 0:
        raise ValueError("q_values must be a non-empty 1-D sequence")
    a = case.arrays
    pd = np.tile(a.pd, (q.size, 1))
    qd = np.tile(a.qd, (q.size, 1))
    qd[:, bus] = q
    return LoadProfile(pd=pd, qd=qd, granularity_s=granularity_s)


# --------------------------------------------------------------------------
# initial points

@dataclass(frozen=True, eq=False)
class InitialPoint:
    p_g: np.ndarray
    q_g: np.ndarray
    vm: np.ndarray
    va: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.p_g, self.q_g, self.vm, self.va])

    @classmethod
    def from_vector(cls, case: NetworkCase, v) -> InitialPoint:
        v = np.asarray(v, dtype=float)
        ng, nb = case.n_gen, case.n_bus
        if v.shape != (2 * ng + 2 * nb,):
            raise ValueError(f"expected {2 * ng + 2 * nb} entries, got {v.shape}")
        return cls(v[:ng].copy(), v[ng:2 * ng].copy(), v[2 * ng:2 * ng + nb].copy(), v[2 * ng + nb:].copy())


def sample_initial_point(case: NetworkCase, rng: np.random.Generator, angle_range: float = math.pi / 6
                         ) -> InitialPoint:
    """Uniform draw inside every box; angles in ``[-angle_range, angle_range]``, slack at 0."""
    a = case.arrays
    pg = rng.uniform(a.pmin, a.pmax)
    qg = rng.uniform(a.qmin, a.qmax)
    vm = rng.uniform(a.vmin, a.vmax)
    va = rng.uniform(-angle_range, angle_range, case.n_bus)
    va[case.slack] = 0.0
    return InitialPoint(pg, qg, vm, va)


def initial_point_stream(case: NetworkCase, seed: int, load_index: int, draw: int,
                         angle_range: float = math.pi / 6) -> InitialPoint:
    return sample_initial_point(case, np.random.default_rng([seed, load_index, draw]), angle_range)


# --------------------------------------------------------------------------
# branch classification

@dataclass(frozen=True)
class BranchRule:
    """Label by ``|V|`` at ``bus`` against a threshold.

    ``threshold`` is a number or ``"two_bus_midpoint"``. The midpoint option
    uses the analytic branch voltages of a two-bus line at the record's load,
    and then also requires the record to sit within ``branch_tol`` of the
    branch it is assigned to: the solver can stop at other stationary points
    (the line's maximum-transfer point, for one), and those belong to
    neither branch. Values within ``dead_band`` of the cut stay unlabelled.
    """

    bus: int
    threshold: float | str = "two_bus_midpoint"
    dead_band: float = 1e-3
    above: str = "low_cost"
    branch_tol: float = 1e-4

    def _branches(self, case: NetworkCase, pd: np.ndarray, qd: np.ndarray) -> tuple[float, float]:
        if self.threshold != "two_bus_midpoint":
            raise ValueError(f"unknown threshold rule {self.threshold!r}")
        hi, lo = TwoBusLine.from_case(case).branch_voltages(qd[self.bus], pd[self.bus])
        return float(hi), float(lo)

    def cut(self, case: NetworkCase, pd: np.ndarray, qd: np.ndarray) -> float:
        if isinstance(self.threshold, str):
            return 0.5 * sum(self._branches(case, pd, qd))
        return float(self.threshold)

    def label(self, case: NetworkCase, pd, qd, vm) -> str | None:
        cut = self.cut(case, pd, qd)
        v = float(vm[self.bus])
        if not np.isfinite(cut) or abs(v - cut) <= self.dead_band:
            return None
        if isinstance(self.threshold, str):
            hi, lo = self._branches(case, pd, qd)
            if abs(v - (hi if v > cut else lo)) > self.branch_tol:
                return None
        below = "high_cost" if self.above == "low_cost" else "low_cost"
        return self.above if v > cut else below


# --------------------------------------------------------------------------
# records and datasets

@dataclass(frozen=True, eq=False)
class SampleRecord:
    load_id: int
    pd: np.ndarray
    qd: np.ndarray
    x0: InitialPoint
    solution: InitialPoint
    objective: float
    converged: bool
    iterations: int
    branch_label: str | None = None


def classify_branch(case: NetworkCase, record: SampleRecord, rule: BranchRule) -> str | None:
    return rule.label(case, record.pd, record.qd, record.solution.vm)


def _record_dtype(nb: int, nx: int) -> np.dtype:
    return np.dtype([
        ("load_id", "<i4"), ("pd", "<f8", (nb,)), ("qd", "<f8", (nb,)), ("x0", "<f8", (nx,)),
        ("solution", "<f8", (nx,)), ("objective", "<f8"), ("converged", "u1"), ("iterations", "<i4"),
        ("label", "i1"),
    ])


@dataclass(eq=False)
class Dataset:
    case_name: str
    n_bus: int
    n_gen: int
    data: np.ndarray                      # structured array, one row per record
    meta: dict = field(default_factory=dict)

    # construction ---------------------------------------------------------
    @classmethod
    def empty(cls, case: NetworkCase, meta: dict | None = None) -> Dataset:
        nx = 2 * case.n_gen + 2 * case.n_bus
        return cls(case.name, case.n_bus, case.n_gen, np.zeros(0, _record_dtype(case.n_bus, nx)), dict(meta or {}))

    def with_rows(self, rows: np.ndarray, **meta) -> Dataset:
        return Dataset(self.case_name, self.n_bus, self.n_gen, np.array(rows, copy=True), {**self.meta, **meta})

    # views ------------------------------------------------------------------
    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def n_primal(self) -> int:
        return 2 * self.n_gen + 2 * self.n_bus

    @property
    def converged(self) -> np.ndarray:
        return self.data["converged"].astype(bool)

    @property
    def labels(self) -> np.ndarray:
        return self.data["label"].astype(int)

    @property
    def load_ids(self) -> np.ndarray:
        return self.data["load_id"].astype(int)

    def vm(self) -> np.ndarray:
        s = 2 * self.n_gen
        return self.data["solution"][:, s:s + self.n_bus]

    def va(self) -> np.ndarray:
        return self.data["solution"][:, 2 * self.n_gen + self.n_bus:]

    def record(self, i: int, case: NetworkCase | None = None) -> SampleRecord:
        r = self.data[i]
        ng, nb = self.n_gen, self.n_bus

        def point(v):
            return InitialPoint(v[:ng].copy(), v[ng:2 * ng].copy(), v[2 * ng:2 * ng + nb].copy(),
                                v[2 * ng + nb:].copy())

        return SampleRecord(int(r["load_id"]), r["pd"].copy(), r["qd"].copy(), point(r["x0"]),
                            point(r["solution"]), float(r["objective"]), bool(r["converged"]),
                            int(r["iterations"]), LABELS[int(r["label"])])

    @property
    def records(self) -> list[SampleRecord]:
        return [self.record(i) for i in range(len(self))]

    def __iter__(self) -> Iterator[SampleRecord]:
        for i in range(len(self)):
            yield self.record(i)

    def select(self, mask_or_index, **meta) -> Dataset:
        return self.with_rows(self.data[mask_or_index], **meta)

    def counts(self) -> dict:
        lab = self.labels
        return {"records": len(self), "converged": int(self.converged.sum()),
                "low_cost": int((lab == 0).sum()), "high_cost": int((lab == 1).sum()),
                "loads": int(np.unique(self.load_ids).size)}

    # io ----------------------------------------------------------------------
    def header(self) -> dict:
        return {"format": "augopf-dataset", "version": FORMAT_VERSION, "case": self.case_name,
                "n_bus": self.n_bus, "n_gen": self.n_gen, "n_records": len(self),
                "fields": list(self.data.dtype.names), "meta": self.meta}

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode()
        body = np.ascontiguousarray(self.data).tobytes()
        return MAGIC + np.uint32(FORMAT_VERSION).tobytes() + np.uint64(len(head)).tobytes() + head + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> Dataset:
        if raw[:8] != MAGIC:
            raise ValueError("not a dataset file (bad magic)")
        version = int(np.frombuffer(raw[8:12], "<u4")[0])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        hlen = int(np.frombuffer(raw[12:20], "<u8")[0])
        head = json.loads(raw[20:20 + hlen].decode())
        nb, ng = head["n_bus"], head["n_gen"]
        dtype = _record_dtype(nb, 2 * ng + 2 * nb)
        body = raw[20 + hlen:]
        if len(body) != head["n_records"] * dtype.itemsize:
            raise ValueError("dataset file truncated or corrupt")
        data = np.frombuffer(body, dtype=dtype).copy()
        return cls(head["case"], nb, ng, data, head["meta"])

    def save(self, path: str | Path) -> str:
        raw = self.to_bytes()
        Path(path).write_bytes(raw)
        return hashlib.sha256(raw).hexdigest()

    @classmethod
    def load(cls, path: str | Path) -> Dataset:
        return cls.from_bytes(Path(path).read_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def to_csv(self, path: str | Path | None = None) -> str:
        """Lossless text export (floats written with ``repr``)."""
        nb, ng = self.n_bus, self.n_gen
        prim = [f"pg{i}" for i in range(ng)] + [f"qg{i}" for i in range(ng)] + \
            [f"vm{i}" for i in range(nb)] + [f"va{i}" for i in range(nb)]
        cols = (["load_id"] + [f"pd{i}" for i in range(nb)] + [f"qd{i}" for i in range(nb)]
                + [f"x0_{c}" for c in prim] + [f"sol_{c}" for c in prim]
                + ["objective", "converged", "iterations", "label"])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.data:
            w.writerow([int(r["load_id"])] + [repr(float(v)) for v in r["pd"]] + [repr(float(v)) for v in r["qd"]]
                       + [repr(float(v)) for v in r["x0"]] + [repr(float(v)) for v in r["solution"]]
                       + [repr(float(r["objective"])), int(r["converged"]), int(r["iterations"]),
                          LABELS[int(r["label"])] or ""])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_csv(cls, text: str, case_name: str, n_bus: int, n_gen: int, meta: dict | None = None) -> Dataset:
        rows = list(csv.reader(io.StringIO(text)))[1:]
        nx = 2 * n_gen + 2 * n_bus
        data = np.zeros(len(rows), _record_dtype(n_bus, nx))
        for i, r in enumerate(rows):
            vals = r
            k = 1
            data[i]["load_id"] = int(vals[0])
            data[i]["pd"] = [float(v) for v in vals[k:k + n_bus]]
            k += n_bus
            data[i]["qd"] = [float(v) for v in vals[k:k + n_bus]]
            k += n_bus
            data[i]["x0"] = [float(v) for v in vals[k:k + nx]]
            k += nx
            data[i]["solution"] = [float(v) for v in vals[k:k + nx]]
            k += nx
            data[i]["objective"] = float(vals[k])
            data[i]["converged"] = int(vals[k + 1])
            data[i]["iterations"] = int(vals[k + 2])
            data[i]["label"] = LABEL_CODES[vals[k + 3] or None]
        return cls(case_name, n_bus, n_gen, data, dict(meta or {}))


# --------------------------------------------------------------------------
# generation

def _solve_one(args):
    case, pd, qd, x0, options = args
    problem = assemble_problem(case, (pd, qd))
    out = solve_opf(problem, x0, options)
    obj = out.objective if np.isfinite(out.objective) else np.nan
    return out.x, obj, out.converged, out.iterations


def _solve_chunk(args):
    case, jobs, options = args
    return [_solve_one((case, pd, qd, x0, options)) for pd, qd, x0 in jobs]


def generate_dataset(case: NetworkCase, profile: LoadProfile, k_init: int, seed: int,
                     angle_range: float = math.pi / 6, rule: BranchRule | None = None, workers: int = 1,
                     options: SolverOptions = DEFAULT_OPTIONS, meta: dict | None = None) -> Dataset:
    """Label every ``(load k, draw j)`` pair with the solver.

    Results are committed in ``(k, j)`` order, so the output does not
    depend on ``workers``.
    """
    if k_init < 1:
        raise ValueError("k_init must be >= 1")
    n = len(profile)
    nx = 2 * case.n_gen + 2 * case.n_bus
    jobs = []
    for k in range(n):
        pd, qd = profile.instance(k)
        for j in range(k_init):
            jobs.append((pd, qd, initial_point_stream(case, seed, k, j, angle_range).vector()))

    if workers > 1:
        size = max(1, math.ceil(len(jobs) / (4 * workers)))
        chunks = [(case, jobs[i:i + size], options) for i in range(0, len(jobs), size)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = [r for chunk in pool.map(_solve_chunk, chunks) for r in chunk]
    else:
        results = [_solve_one((case, pd, qd, x0, options)) for pd, qd, x0 in jobs]

    data = np.zeros(len(jobs), _record_dtype(case.n_bus, nx))
    for i, ((pd, qd, x0), (x, obj, conv, its)) in enumerate(zip(jobs, results)):
        row = data[i]
        row["load_id"] = i // k_init
        row["pd"] = pd
        row["qd"] = qd
        row["x0"] = x0
        row["solution"] = x
        row["objective"] = obj
        row["converged"] = conv
        row["iterations"] = its
        label = None
        if rule is not None and conv:
            label = rule.label(case, pd, qd, x[2 * case.n_gen:2 * case.n_gen + case.n_bus])
        row["label"] = LABEL_CODES[label]
    info = {"seed": int(seed), "k_init": int(k_init), "n_loads": n, "angle_range": float(angle_range),
            "rule": None if rule is None else {"bus": rule.bus, "threshold": rule.threshold,
                                               "dead_band": rule.dead_band, "above": rule.above,
                                               "branch_tol": rule.branch_tol},
            **(meta or {})}
    ds = Dataset(case.name, case.n_bus, case.n_gen, data, info)
    log.info("generated %s", ds.counts())
    return ds


# --------------------------------------------------------------------------
# mixing and splitting

def mix_dataset(ds: Dataset, ratio: tuple[int, int] = (1, 1), drop_incomplete: bool = False) -> Dataset:
    """Subsample each load to exactly ``low_cost : high_cost = ratio``.

    Per load, with ``a:b = ratio`` and ``n_low``, ``n_high`` labelled records,
    ``m = min(n_low // a, n_high // b)`` and the first ``a m`` / ``b m``
    records (in file order) are kept. A zero entry drops that label. Loads
    that cannot supply a required label raise, unless ``drop_incomplete``.
    """
    a, b = (int(r) for r in ratio)
    if a < 0 or b < 0 or a + b == 0:
        raise ValueError("ratio entries must be non-negative and not both zero")
    lab = ds.labels
    ids = ds.load_ids
    keep: list[np.ndarray] = []
    dropped = 0
    for lid in np.unique(ids):
        rows = np.flatnonzero(ids == lid)
        low = rows[lab[rows] == 0]
        high = rows[lab[rows] == 1]
        caps = [low.size // a if a else None, high.size // b if b else None]
        m = min(c for c in caps if c is not None)
        if m == 0:
            if drop_incomplete:
                dropped += 1
                continue
            raise ValueError(f"load {lid} lacks records for ratio {a}:{b} "
                             f"(low_cost={low.size}, high_cost={high.size})")
        keep.append(np.sort(np.concatenate([low[:a * m], high[:b * m]])))
    idx = np.concatenate(keep) if keep else np.zeros(0, int)
    out = ds.select(idx, mix_ratio=[a, b], mix_rule="per load: m = min(n_low//a, n_high//b); keep a*m, b*m",
                    mix_dropped_loads=dropped)
    log.info("mixed %d:%d -> %s (dropped %d loads)", a, b, out.counts(), dropped)
    return out


def input_features(ds: Dataset, augmented: bool = True) -> np.ndarray:
    """Raw network inputs: ``[pd | qd]`` and, when augmented, ``| x0``."""
    blocks = [ds.data["pd"], ds.data["qd"]]
    if augmented:
        blocks.append(ds.data["x0"])
    return np.concatenate(blocks, axis=1)


def output_targets(ds: Dataset, slack: int) -> np.ndarray:
    """Regression targets ``[vm (nb) | va without the slack (nb - 1)]``."""
    return np.concatenate([ds.vm(), np.delete(ds.va(), slack, axis=1)], axis=1)


SCALE_FLOOR = 1e-3


def scaler_stats(x: np.ndarray) -> dict:
    """Per-column mean and standard deviation, the latter floored at ``SCALE_FLOOR``.

    Near-constant columns (a magnitude pinned at its bound, say) would
    otherwise turn solver round-off into large standardized targets.
    """
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), SCALE_FLOOR)
    return {"mean": mean.tolist(), "scale": std.tolist()}


def split_dataset(ds: Dataset, train_fraction: float = 0.8, seed: int = 0, slack: int | None = None
                  ) -> tuple[Dataset, Dataset]:
    """Split by load instance; scaler statistics come from converged train records only."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    loads = np.unique(ds.load_ids)
    n_train = int(round(train_fraction * loads.size))
    if n_train == 0 or n_train == loads.size:
        raise ValueError(f"split of {loads.size} loads at {train_fraction} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(loads)
    train_loads = np.sort(perm[:n_train])
    in_train = np.isin(ds.load_ids, train_loads)
    train = ds.select(in_train)
    fit = train.select(train.converged) if train.converged.any() else train
    scalers = {"input": scaler_stats(input_features(fit, True))}
    if slack is not None:
        scalers["output"] = scaler_stats(output_targets(fit, slack))
    meta = {"split_seed": int(seed), "train_fraction": float(train_fraction), "scalers": scalers}
    return train.with_rows(train.data, split="train", **meta), ds.select(~in_train, split="test", **meta)
