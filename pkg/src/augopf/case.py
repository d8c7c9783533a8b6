"""Power-network case model and MATPOWER-subset reader/writer.

Supported grammar (whitespace and ``%`` comments are free everywhere)::

    case      := [ "function" ident "=" ident ] { statement }
    statement := "mpc." ident "=" ( scalar | string | matrix ) [ ";" ]
    matrix    := "[" { row } "]"
    row       := number { [","] number } ( ";" | newline )
    string    := "'" { char } "'"

Only ``baseMVA``, ``bus``, ``gen``, ``branch`` and ``gencost`` are consumed.
Other fields and extra matrix columns are ignored with a logged warning.

Quantities are kept in file units (MW, MVAr, MW/MVAr-at-1-p.u. for shunts).
This makes ``parse_case(serialize_case(case)) == case`` exact; per-unit
conversion happens at use sites through :func:`to_per_unit`.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)

DEFAULT_BASE_MVA = 100.0

# consumed column counts per MATPOWER table
_BUS_COLS = 13
_GEN_COLS = 10
_BRANCH_COLS = 13


class CaseError(ValueError):
    """Raised for malformed or structurally inconsistent case data."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class BusType(str, Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


_TYPE_FROM_CODE = {1: BusType.PQ, 2: BusType.PV, 3: BusType.SLACK}
_CODE_FROM_TYPE = {v: k for k, v in _TYPE_FROM_CODE.items()}


@dataclass(frozen=True)
class Bus:
    """A network node.

    Attributes:
        id: internal index, contiguous from 0.
        bus_type: slack, pv or pq.
        v_min, v_max: voltage magnitude bounds in p.u.
        base_kv: nominal voltage in kV.
        shunt_g, shunt_b: shunt conductance/susceptance in MW/MVAr at 1 p.u.
        default_pd, default_qd: nominal demand in MW/MVAr.
    """

    id: int
    bus_type: BusType
    v_min: float
    v_max: float
    base_kv: float = 0.0
    shunt_g: float = 0.0
    shunt_b: float = 0.0
    default_pd: float = 0.0
    default_qd: float = 0.0


@dataclass(frozen=True)
class Branch:
    """Pi-model line or transformer. ``tap_ratio`` sits on the from side;
    ``s_max == 0`` means unlimited."""

    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap_ratio: float = 1.0
    s_max: float = 0.0


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost_c2: float = 0.0
    cost_c1: float = 0.0
    cost_c0: float = 0.0


@dataclass(frozen=True)
class NetworkCase:
    """Immutable network description in internal bus numbering."""

    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    name: str = "case"
    external_ids: tuple[int, ...] = field(default=())

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @cached_property
    def slack(self) -> int:
        return next(b.id for b in self.buses if b.bus_type is BusType.SLACK)

    @cached_property
    def arrays(self) -> CaseArrays:
        return CaseArrays.from_case(self)

    def internal_index(self, external_id: int) -> int:
        return self.external_ids.index(external_id)

    def summary(self) -> str:
        nb, nl, ng = self.n_bus, self.n_branch, self.n_gen
        return (f"{nb} bus{'es' if nb != 1 else ''}, {nl} branch{'es' if nl != 1 else ''}, "
                f"{ng} generator{'s' if ng != 1 else ''}")


@dataclass(frozen=True, eq=False)
class CaseArrays:
    """Vectorized per-unit view of a case; built once and cached on the case."""

    vmin: np.ndarray
    vmax: np.ndarray
    pd: np.ndarray
    qd: np.ndarray
    gs: np.ndarray
    bs: np.ndarray
    f: np.ndarray
    t: np.ndarray
    r: np.ndarray
    x: np.ndarray
    b: np.ndarray
    tap: np.ndarray
    smax: np.ndarray
    gen_bus: np.ndarray
    pmin: np.ndarray
    pmax: np.ndarray
    qmin: np.ndarray
    qmax: np.ndarray
    c2: np.ndarray
    c1: np.ndarray
    c0: np.ndarray

    @classmethod
    def from_case(cls, case: NetworkCase) -> CaseArrays:
        base = case.base_mva

        def col(items, attr, scale=1.0):
            out = np.array([getattr(it, attr) for it in items], dtype=float) / scale
            out.setflags(write=False)
            return out

        def icol(items, attr):
            out = np.array([getattr(it, attr) for it in items], dtype=np.intp)
            out.setflags(write=False)
            return out

        bu, br, ge = case.buses, case.branches, case.generators
        return cls(
            vmin=col(bu, "v_min"), vmax=col(bu, "v_max"),
            pd=col(bu, "default_pd", base), qd=col(bu, "default_qd", base),
            gs=col(bu, "shunt_g", base), bs=col(bu, "shunt_b", base),
            f=icol(br, "from_bus"), t=icol(br, "to_bus"),
            r=col(br, "r"), x=col(br, "x"), b=col(br, "b_charging"),
            tap=col(br, "tap_ratio"), smax=col(br, "s_max", base),
            gen_bus=icol(ge, "bus"),
            pmin=col(ge, "p_min", base), pmax=col(ge, "p_max", base),
            qmin=col(ge, "q_min", base), qmax=col(ge, "q_max", base),
            # cost is kept in $/h per MW; see opf.problem for the p.u. form
            c2=col(ge, "cost_c2"), c1=col(ge, "cost_c1"), c0=col(ge, "cost_c0"),
        )


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        return "valid" if self.ok else "\n".join(self.violations)


def to_per_unit(case_or_base: NetworkCase | float, quantities):
    """MW/MVAr -> p.u. on the system base."""
    base = case_or_base.base_mva if isinstance(case_or_base, NetworkCase) else float(case_or_base)
    if not base > 0:
        raise ValueError(f"base_mva must be positive, got {base}")
    return np.asarray(quantities, dtype=float) / base if np.ndim(quantities) else float(quantities) / base


def from_per_unit(case_or_base: NetworkCase | float, quantities):
    base = case_or_base.base_mva if isinstance(case_or_base, NetworkCase) else float(case_or_base)
    if not base > 0:
        raise ValueError(f"base_mva must be positive, got {base}")
    return np.asarray(quantities, dtype=float) * base if np.ndim(quantities) else float(quantities) * base


# --------------------------------------------------------------------------
# parsing

_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")
_FUNC = re.compile(r"^\s*function\s+\w+\s*=\s*(\w+)")


def _strip_comment(line: str) -> str:
    out, quoted = [], False
    for ch in line:
        if ch == "'":
            quoted = not quoted
        elif ch == "%" and not quoted:
            break
        out.append(ch)
    return "".join(out)


def _parse_number(tok: str, lineno: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise CaseError(f"invalid number {tok!r}", lineno) from None
    if not math.isfinite(v):
        raise CaseError(f"non-finite value {tok!r}", lineno)
    return v


def _read_tables(text: str) -> tuple[str | None, dict[str, object], dict[str, int]]:
    """Tokenize into ``{field: scalar | str | list[(lineno, row)]}``."""
    name = None
    fields: dict[str, object] = {}
    starts: dict[str, int] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        lineno = i + 1
        raw = _strip_comment(lines[i])
        i += 1
        if not raw.strip():
            continue
        m = _FUNC.match(raw)
        if m:
            name = m.group(1)
            continue
        m = _ASSIGN.match(raw)
        if not m:
            raise CaseError(f"unexpected statement {raw.strip()!r}", lineno)
        key, rhs = m.group(1), m.group(2).strip()
        starts[key] = lineno
        if rhs.startswith("["):
            rows: list[tuple[int, list[float]]] = []
            body, cur_line, closed = rhs[1:], lineno, False
            while True:
                if "]" in body:
                    body, tail = body.split("]", 1)
                    if tail.strip() not in ("", ";"):
                        raise CaseError(f"trailing text after matrix: {tail.strip()!r}", cur_line)
                    closed = True
                for chunk in body.split(";"):
                    toks = [t for t in re.split(r"[\s,]+", chunk.strip()) if t]
                    if toks:
                        rows.append((cur_line, [_parse_number(t, cur_line) for t in toks]))
                if closed:
                    break
                if i >= len(lines):
                    raise CaseError(f"unterminated matrix mpc.{key}", lineno)
                body = _strip_comment(lines[i])
                cur_line = i + 1
                i += 1
            fields[key] = rows
        else:
            rhs = rhs.rstrip(";").strip()
            if rhs.startswith("'"):
                if not rhs.endswith("'") or len(rhs) < 2:
                    raise CaseError("unterminated string", lineno)
                fields[key] = rhs[1:-1]
            else:
                fields[key] = _parse_number(rhs, lineno)
    return name, fields, starts


def _table(fields, starts, key, ncols, required=True, fixed_width=True):
    rows = fields.get(key)
    if rows is None:
        if required:
            raise CaseError(f"missing table mpc.{key}")
        return []
    if not isinstance(rows, list):
        raise CaseError(f"mpc.{key} must be a matrix", starts.get(key))
    extra = False
    for lineno, row in rows:
        if len(row) < ncols:
            raise CaseError(f"mpc.{key} row has {len(row)} columns, need {ncols}", lineno)
        extra |= len(row) > ncols
    if extra and fixed_width:
        logger.warning("mpc.%s: columns beyond %d ignored", key, ncols)
    return rows


def parse_case(text: str, name: str | None = None) -> NetworkCase:
    """Parse MATPOWER-subset text into a :class:`NetworkCase`.

    Out-of-service branches/generators and isolated (type 4) buses are
    dropped. External bus numbers are kept in ``external_ids``.
    """
    fname, fields, starts = _read_tables(text)
    for key in fields:
        if key not in ("version", "baseMVA", "bus", "gen", "branch", "gencost"):
            logger.warning("mpc.%s ignored", key)
    base = fields.get("baseMVA", DEFAULT_BASE_MVA)
    if not isinstance(base, float) or base <= 0:
        raise CaseError("baseMVA must be a positive number", starts.get("baseMVA"))

    bus_rows = _table(fields, starts, "bus", _BUS_COLS)
    if not bus_rows:
        raise CaseError("no buses")
    gen_rows = _table(fields, starts, "gen", _GEN_COLS, required=False)
    branch_rows = _table(fields, starts, "branch", _BRANCH_COLS, required=False)
    cost_rows = _table(fields, starts, "gencost", 4, required=False, fixed_width=False)

    ext_ids: list[int] = []
    seen: dict[int, int] = {}
    keep_rows = []
    isolated = set()
    for lineno, row in bus_rows:
        ext = int(row[0])
        if ext != row[0]:
            raise CaseError(f"bus id {row[0]} is not an integer", lineno)
        if ext in seen:
            raise CaseError(f"duplicate bus id {ext}", lineno)
        seen[ext] = lineno
        code = int(row[1])
        if code == 4:
            isolated.add(ext)
            continue
        if code not in _TYPE_FROM_CODE:
            raise CaseError(f"unknown bus type {row[1]}", lineno)
        keep_rows.append((lineno, row))
        ext_ids.append(ext)
    if isolated:
        logger.warning("isolated buses removed: %s", sorted(isolated))
    if not keep_rows:
        raise CaseError("no buses")
    index = {ext: k for k, ext in enumerate(ext_ids)}

    buses = []
    for k, (lineno, row) in enumerate(keep_rows):
        buses.append(Bus(
            id=k, bus_type=_TYPE_FROM_CODE[int(row[1])],
            default_pd=row[2], default_qd=row[3], shunt_g=row[4], shunt_b=row[5],
            base_kv=row[9], v_max=row[11], v_min=row[12],
        ))
    if not any(b.bus_type is BusType.SLACK for b in buses):
        raise CaseError("no slack bus", starts.get("bus"))

    def resolve(ext_val, lineno, what):
        ext = int(ext_val)
        if ext in isolated:
            return None
        if ext not in index:
            raise CaseError(f"{what} references missing bus {ext_val:g}", lineno)
        return index[ext]

    if cost_rows and len(cost_rows) < len(gen_rows):
        raise CaseError(f"gencost has {len(cost_rows)} rows for {len(gen_rows)} generators",
                        starts.get("gencost"))
    if len(cost_rows) > len(gen_rows):
        logger.warning("gencost rows beyond generator count ignored (reactive costs unsupported)")

    generators = []
    for g, (lineno, row) in enumerate(gen_rows):
        bus = resolve(row[0], lineno, "generator")
        c2 = c1 = c0 = 0.0
        if cost_rows:
            clineno, crow = cost_rows[g]
            model, ncost = int(crow[0]), int(crow[3])
            if model != 2:
                raise CaseError("only polynomial (model 2) costs are supported", clineno)
            if not 1 <= ncost <= 3:
                raise CaseError(f"polynomial cost of degree {ncost - 1} unsupported", clineno)
            coefs = crow[4:4 + ncost]
            if len(coefs) < ncost:
                raise CaseError("gencost row too short", clineno)
            padded = [0.0] * (3 - ncost) + list(coefs)
            c2, c1, c0 = padded
        if row[7] <= 0 or bus is None:
            continue
        generators.append(Generator(bus=bus, q_max=row[3], q_min=row[4], p_max=row[8], p_min=row[9],
                                    cost_c2=c2, cost_c1=c1, cost_c0=c0))

    branches = []
    for lineno, row in branch_rows:
        f = resolve(row[0], lineno, "branch")
        t = resolve(row[1], lineno, "branch")
        if row[10] <= 0 or f is None or t is None:
            continue
        if row[9] != 0:
            raise CaseError("phase-shifting transformers are not supported", lineno)
        if not (row[11] <= -360 and row[12] >= 360) and not (row[11] == 0 and row[12] == 0):
            logger.warning("line %d: branch angle limits ignored", lineno)
        branches.append(Branch(from_bus=f, to_bus=t, r=row[2], x=row[3], b_charging=row[4],
                               s_max=row[5], tap_ratio=row[8] if row[8] != 0 else 1.0))

    return NetworkCase(base_mva=base, buses=tuple(buses), branches=tuple(branches),
                       generators=tuple(generators), name=name or fname or "case",
                       external_ids=tuple(ext_ids))


def load_case(path_or_name: str | Path) -> NetworkCase:
    """Read a case file, or a bundled case by name (``case2_bistable``, ``case39``)."""
    p = Path(path_or_name)
    if p.suffix != ".m" and not p.exists():
        res = resources.files("augopf.cases") / f"{path_or_name}.m"
        if res.is_file():
            return parse_case(res.read_text(encoding="utf-8"), name=str(path_or_name))
    text = p.read_text(encoding="utf-8")
    return parse_case(text, name=p.stem)


def bundled_cases() -> list[str]:
    return sorted(r.name[:-2] for r in resources.files("augopf.cases").iterdir() if r.name.endswith(".m"))


# --------------------------------------------------------------------------
# serialization

def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)


def serialize_case(case: NetworkCase) -> str:
    """Canonical MATPOWER-subset text; exact inverse of :func:`parse_case`."""
    ext = case.external_ids or tuple(range(1, case.n_bus + 1))
    out = [f"function mpc = {case.name}", "mpc.version = '2';", f"mpc.baseMVA = {_fmt(case.base_mva)};", "",
           "mpc.bus = ["]
    for b in case.buses:
        row = [ext[b.id], _CODE_FROM_TYPE[b.bus_type], b.default_pd, b.default_qd, b.shunt_g, b.shunt_b,
               1, 1, 0, b.base_kv, 1, b.v_max, b.v_min]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out += ["];", "", "mpc.gen = ["]
    for g in case.generators:
        row = [ext[g.bus], 0, 0, g.q_max, g.q_min, 1, case.base_mva, 1, g.p_max, g.p_min]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out += ["];", "", "mpc.branch = ["]
    for br in case.branches:
        row = [ext[br.from_bus], ext[br.to_bus], br.r, br.x, br.b_charging, br.s_max, br.s_max, br.s_max,
               br.tap_ratio, 0, 1, -360, 360]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out += ["];", "", "mpc.gencost = ["]
    for g in case.generators:
        row = [2, 0, 0, 3, g.cost_c2, g.cost_c1, g.cost_c0]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out += ["];", ""]
    return "\n".join(out)


# --------------------------------------------------------------------------
# validation

def validate_case(case: NetworkCase) -> ValidationReport:
    """Collect every invariant violation; an empty report means valid."""
    rep = ValidationReport()
    v = rep.violations
    n = case.n_bus
    if n == 0:
        v.append("no buses")
        return rep
    if not case.base_mva > 0:
        v.append(f"base_mva {case.base_mva} must be positive")
    ext = case.external_ids or tuple(range(1, n + 1))
    if len(set(ext)) != len(ext):
        v.append("external bus ids are not unique")
    if [b.id for b in case.buses] != list(range(n)):
        v.append("internal bus ids are not contiguous")
    n_slack = sum(b.bus_type is BusType.SLACK for b in case.buses)
    if n_slack != 1:
        v.append(f"expected exactly one slack bus, found {n_slack}")
    for b in case.buses:
        vals = (b.v_min, b.v_max, b.base_kv, b.shunt_g, b.shunt_b, b.default_pd, b.default_qd)
        if not all(math.isfinite(x) for x in vals):
            v.append(f"bus {ext[b.id]}: non-finite field")
        if not b.v_min > 0:
            v.append(f"bus {ext[b.id]}: v_min {b.v_min} must be positive")
        if b.v_min > b.v_max:
            v.append(f"bus {ext[b.id]}: v_min {b.v_min} > v_max {b.v_max}")
    for k, br in enumerate(case.branches):
        label = f"branch {k} ({_label(ext, br.from_bus)}-{_label(ext, br.to_bus)})"
        if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
            v.append(f"{label}: references missing bus")
            continue
        if br.from_bus == br.to_bus:
            v.append(f"{label}: from_bus equals to_bus")
        if br.r == 0 and br.x == 0:
            v.append(f"{label}: zero impedance (r = x = 0)")
        if br.s_max < 0:
            v.append(f"{label}: negative s_max")
        if not br.tap_ratio > 0:
            v.append(f"{label}: tap ratio must be positive")
    for k, g in enumerate(case.generators):
        if not 0 <= g.bus < n:
            v.append(f"generator {k}: references missing bus")
        if g.p_min > g.p_max:
            v.append(f"generator {k}: p_min > p_max")
        if g.q_min > g.q_max:
            v.append(f"generator {k}: q_min > q_max")
        if g.cost_c2 < 0:
            v.append(f"generator {k}: negative quadratic cost")
    good = [br for br in case.branches if 0 <= br.from_bus < n and 0 <= br.to_bus < n]
    if n > 1:
        rows = [br.from_bus for br in good]
        cols = [br.to_bus for br in good]
        graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        ncomp, labels = connected_components(graph, directed=False)
        if ncomp > 1:
            main = labels[case.slack] if n_slack else labels[0]
            cut = [_label(ext, i) for i in range(n) if labels[i] != main]
            v.append(f"network is disconnected: buses {cut} unreachable from the slack bus")
    return rep


def _label(ext, i):
    return ext[i] if 0 <= i < len(ext) else i
