"""OPF problem assembly: variable layout, constraint sets, objective.

Primal vector (full, physical order)::

    x = [ P_G (ng) | Q_G (ng) | |V| (nb) | angle (nb) ]     all p.u. / rad

Variables pinned by an equality are eliminated: the reference angle (0) and
every variable whose box is degenerate (``lb == ub``). The solver works on
the remaining *free* coordinates. ``n_eq = 2 * nb`` counts the active and
reactive balance equations; pinned variables are reported as ``n_fixed``.

Inequalities ``h(x) <= 0`` in order:

1. ``|S_from|^2 - s_max^2`` for branches with a limit
2. ``|S_to|^2 - s_max^2`` for the same branches
3. ``lb - x`` for free variables with a finite lower bound
4. ``x - ub`` for free variables with a finite upper bound
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from augopf.case import NetworkCase
from augopf.powerflow import build_admittance


@dataclass(frozen=True, eq=False)
class VariableLayout:
    nb: int
    ng: int
    free: np.ndarray          # indices into the full primal vector
    fixed: np.ndarray
    fixed_values: np.ndarray
    lb: np.ndarray            # full-vector bounds (+-inf where unbounded)
    ub: np.ndarray
    lower_idx: np.ndarray     # positions in the *free* vector with a lower bound
    upper_idx: np.ndarray
    limited: np.ndarray       # branch indices with s_max > 0

    @cached_property
    def n_full(self) -> int:
        return 2 * self.ng + 2 * self.nb

    @cached_property
    def n_primal(self) -> int:
        return self.free.size

    @cached_property
    def n_fixed(self) -> int:
        return self.fixed.size

    @cached_property
    def n_eq(self) -> int:
        return 2 * self.nb

    @cached_property
    def n_branch_ineq(self) -> int:
        return 2 * self.limited.size

    @cached_property
    def n_ineq(self) -> int:
        return self.n_branch_ineq + self.lower_idx.size + self.upper_idx.size

    @cached_property
    def n_z(self) -> int:
        return self.n_primal + self.n_eq + 2 * self.n_ineq

    # slices of the full primal vector
    @cached_property
    def pg(self) -> slice:
        return slice(0, self.ng)

    @cached_property
    def qg(self) -> slice:
        return slice(self.ng, 2 * self.ng)

    @cached_property
    def vm(self) -> slice:
        return slice(2 * self.ng, 2 * self.ng + self.nb)

    @cached_property
    def va(self) -> slice:
        return slice(2 * self.ng + self.nb, 2 * self.ng + 2 * self.nb)

    # slices of Z = [x_free | lam | mu | s]
    @cached_property
    def z_x(self) -> slice:
        return slice(0, self.n_primal)

    @cached_property
    def z_lam(self) -> slice:
        return slice(self.n_primal, self.n_primal + self.n_eq)

    @cached_property
    def z_mu(self) -> slice:
        a = self.n_primal + self.n_eq
        return slice(a, a + self.n_ineq)

    @cached_property
    def z_s(self) -> slice:
        a = self.n_primal + self.n_eq + self.n_ineq
        return slice(a, a + self.n_ineq)

    def full(self, x_free: np.ndarray) -> np.ndarray:
        x = np.empty(self.n_full)
        x[self.fixed] = self.fixed_values
        x[self.free] = x_free
        return x

    def pack(self, pg, qg, vm, va) -> np.ndarray:
        """Full primal vector from its parts."""
        return np.concatenate([np.asarray(pg, float), np.asarray(qg, float),
                               np.asarray(vm, float), np.asarray(va, float)])


@dataclass(frozen=True, eq=False)
class OpfProblem:
    """A case plus one per-bus load (p.u.), with cached dense network data."""

    case: NetworkCase
    pd: np.ndarray
    qd: np.ndarray
    layout: VariableLayout

    @property
    def n_primal(self) -> int:
        return self.layout.n_primal

    @property
    def n_eq(self) -> int:
        return self.layout.n_eq

    @property
    def n_ineq(self) -> int:
        return self.layout.n_ineq

    @cached_property
    def net(self) -> _DenseNetwork:
        return _DenseNetwork.build(self.case, self.layout)


@dataclass(frozen=True, eq=False)
class _DenseNetwork:
    ybus: np.ndarray
    yf_lim: np.ndarray
    yt_lim: np.ndarray
    f_lim: np.ndarray
    t_lim: np.ndarray
    cf_lim: np.ndarray
    ct_lim: np.ndarray
    smax2: np.ndarray
    cg: np.ndarray            # nb x ng incidence
    c2: np.ndarray            # cost coefficients on p.u. generation
    c1: np.ndarray
    c0: np.ndarray

    @classmethod
    def build(cls, case: NetworkCase, layout: VariableLayout) -> _DenseNetwork:
        a = case.arrays
        y = build_admittance(case)
        ybus, yf, yt = y.dense()
        lim = layout.limited
        nb, ng = case.n_bus, case.n_gen
        cf = np.zeros((lim.size, nb))
        ct = np.zeros((lim.size, nb))
        cf[np.arange(lim.size), a.f[lim]] = 1.0
        ct[np.arange(lim.size), a.t[lim]] = 1.0
        cg = np.zeros((nb, ng))
        cg[a.gen_bus, np.arange(ng)] = 1.0
        base = case.base_mva
        return cls(ybus=ybus, yf_lim=yf[lim], yt_lim=yt[lim], f_lim=a.f[lim].copy(), t_lim=a.t[lim].copy(),
                   cf_lim=cf, ct_lim=ct, smax2=a.smax[lim] ** 2, cg=cg,
                   c2=a.c2 * base * base, c1=a.c1 * base, c0=a.c0.copy())


def build_layout(case: NetworkCase) -> VariableLayout:
    a = case.arrays
    nb, ng = case.n_bus, case.n_gen
    lb = np.concatenate([a.pmin, a.qmin, a.vmin, np.full(nb, -np.inf)])
    ub = np.concatenate([a.pmax, a.qmax, a.vmax, np.full(nb, np.inf)])
    ref = 2 * ng + nb + case.slack
    pinned = lb == ub
    pinned[ref] = True
    values = np.where(lb == ub, lb, 0.0)
    values[ref] = 0.0
    fixed = np.flatnonzero(pinned)
    free = np.flatnonzero(~pinned)
    lower_idx = np.flatnonzero(np.isfinite(lb[free]))
    upper_idx = np.flatnonzero(np.isfinite(ub[free]))
    limited = np.flatnonzero(a.smax > 0)
    return VariableLayout(nb=nb, ng=ng, free=free, fixed=fixed, fixed_values=values[fixed], lb=lb, ub=ub,
                          lower_idx=lower_idx, upper_idx=upper_idx, limited=limited)


def assemble_problem(case: NetworkCase, load=None) -> OpfProblem:
    """Bind a per-bus ``(pd, qd)`` p.u. load to the case (defaults from the case file)."""
    if load is None:
        pd, qd = case.arrays.pd, case.arrays.qd
    else:
        pd, qd = load
    pd = np.array(pd, dtype=float)
    qd = np.array(qd, dtype=float)
    if pd.shape != (case.n_bus,) or qd.shape != (case.n_bus,):
        raise ValueError(f"load must have {case.n_bus} entries per component")
    return OpfProblem(case=case, pd=pd, qd=qd, layout=build_layout(case))


def objective(case: NetworkCase, p_g) -> float:
    """Total generation cost in $/h for active generation given in MW."""
    p = np.asarray(p_g, dtype=float)
    a = case.arrays
    if p.shape != (case.n_gen,):
        raise ValueError(f"expected {case.n_gen} generator outputs, got {p.shape}")
    return float(np.sum(a.c2 * p * p + a.c1 * p + a.c0))


def objective_pu(case: NetworkCase, p_g_pu) -> float:
    return objective(case, np.asarray(p_g_pu, dtype=float) * case.base_mva)
