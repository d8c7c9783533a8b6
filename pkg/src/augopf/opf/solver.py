"""Primal-dual interior-point Newton solver for AC-OPF.

The solver iterates on ``Z = [x | lam | mu | s]`` (free primal variables,
balance multipliers, inequality multipliers, slacks) and minimizes the
barrier-augmented Lagrangian::

    L(Z) = f(x) + lam^T g(x) + mu^T (h(x) + s) - gamma * sum(log s)

Every step solves the Newton system of the perturbed KKT conditions, with
the complementarity row linearized in primal-dual form (``S mu = gamma``)
and the slack/multiplier blocks eliminated. Constants are fixed so the map
``(x0, load) -> outcome`` is a deterministic function:

* ``gamma0 = 1``; after each step ``gamma <- min(gamma, 0.1 * s.mu / n_ineq)``
* step lengths: fraction-to-boundary 0.9995 on ``s`` (primal) and ``mu`` (dual)
* start: ``s = max(-h(x0), 0.1)``, ``mu = 1``, ``lam = 0``
* stop: ``max(|g|, h+) <= 1e-6``, ``|grad_x L| / (1 + max|lam, mu|) <= 1e-8``
  and ``s.mu <= 1e-8``; at most 150 iterations
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from augopf.opf.derivatives import d2asbr_dv2, d2sbus_dv2
from augopf.opf.problem import OpfProblem, objective_pu
from augopf.powerflow import VoltageProfile, dsbr_dv, dsbus_dv


@dataclass(frozen=True)
class SolverOptions:
    max_iter: int = 150
    feas_tol: float = 1e-6
    grad_tol: float = 1e-8
    comp_tol: float = 1e-8
    sigma: float = 0.1
    gamma0: float = 1.0
    step_fraction: float = 0.9995
    slack_floor: float = 0.1
    mu0: float = 1.0
    reg_start: float = 1e-8
    reg_max: float = 1e-2
    solve_tol: float = 1e-10
    trace: bool = False


DEFAULT_OPTIONS = SolverOptions()


class StepFailure(RuntimeError):
    """The Newton system stayed singular after regularization."""


@dataclass
class NewtonState:
    z: np.ndarray
    barrier_mu: float
    t: int = 0
    alpha: float = 0.0
    alpha_dual: float = 0.0

    def copy(self) -> NewtonState:
        return NewtonState(self.z.copy(), self.barrier_mu, self.t, self.alpha, self.alpha_dual)


@dataclass
class KktEvaluation:
    gradient: np.ndarray
    stationarity: float
    eq_feasibility: float
    ineq_feasibility: float
    complementarity: float


@dataclass
class OpfOutcome:
    p_g: np.ndarray
    q_g: np.ndarray
    voltages: VoltageProfile
    objective: float
    converged: bool
    iterations: int
    kkt_residual: float
    feasibility: float
    trajectory_digest: str
    multipliers: dict[str, np.ndarray] = field(default_factory=dict)
    lam: np.ndarray | None = None
    message: str = ""
    trace: list[dict] = field(default_factory=list)

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.p_g, self.q_g, self.voltages.vm, self.voltages.va])


@dataclass
class _Eval:
    """Functions and first derivatives at a primal point (free coordinates)."""

    f: float
    df: np.ndarray
    g: np.ndarray
    jg: np.ndarray
    h: np.ndarray
    jh: np.ndarray


def _split(problem: OpfProblem, x_full: np.ndarray):
    lay = problem.layout
    return x_full[lay.pg], x_full[lay.qg], x_full[lay.vm], x_full[lay.va]


def evaluate(problem: OpfProblem, x_free: np.ndarray) -> _Eval:
    lay, net = problem.layout, problem.net
    nb, ng = lay.nb, lay.ng
    x = lay.full(x_free)
    pg, qg, vm, va = _split(problem, x)
    v = vm * np.exp(1j * va)
    nf = lay.n_full

    f = float(np.sum(net.c2 * pg * pg + net.c1 * pg + net.c0))
    df_full = np.zeros(nf)
    df_full[lay.pg] = 2 * net.c2 * pg + net.c1

    s = v * np.conj(net.ybus @ v)
    g = np.concatenate([s.real + problem.pd - net.cg @ pg, s.imag + problem.qd - net.cg @ qg])
    ds_dva, ds_dvm = dsbus_dv(net.ybus, v)
    jg = np.zeros((2 * nb, nf))
    jg[:nb, lay.pg] = -net.cg
    jg[nb:, lay.qg] = -net.cg
    jg[:nb, lay.vm] = ds_dvm.real
    jg[nb:, lay.vm] = ds_dvm.imag
    jg[:nb, lay.va] = ds_dva.real
    jg[nb:, lay.va] = ds_dva.imag

    nlim = lay.limited.size
    jh_br = np.zeros((2 * nlim, nf))
    h_br = np.zeros(2 * nlim)
    if nlim:
        for k, (ybr, idx) in enumerate(((net.yf_lim, net.f_lim), (net.yt_lim, net.t_lim))):
            da, dm, sbr = dsbr_dv(ybr, idx, v)
            rows = slice(k * nlim, (k + 1) * nlim)
            h_br[rows] = (sbr * np.conj(sbr)).real - net.smax2
            jh_br[rows, lay.vm] = 2 * (sbr.real[:, None] * dm.real + sbr.imag[:, None] * dm.imag)
            jh_br[rows, lay.va] = 2 * (sbr.real[:, None] * da.real + sbr.imag[:, None] * da.imag)

    free = lay.free
    xf = x[free]
    lbf, ubf = lay.lb[free], lay.ub[free]
    nlo, nup = lay.lower_idx.size, lay.upper_idx.size
    h = np.concatenate([h_br, lbf[lay.lower_idx] - xf[lay.lower_idx], xf[lay.upper_idx] - ubf[lay.upper_idx]])
    jh = np.zeros((h.size, free.size))
    jh[: 2 * nlim] = jh_br[:, free]
    jh[2 * nlim + np.arange(nlo), lay.lower_idx] = -1.0
    jh[2 * nlim + nlo + np.arange(nup), lay.upper_idx] = 1.0
    return _Eval(f=f, df=df_full[free], g=g, jg=jg[:, free], h=h, jh=jh)


def hessian_x(problem: OpfProblem, x_free: np.ndarray, lam: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Hessian of ``f + lam^T g + mu^T h`` w.r.t. the free primal variables."""
    lay, net = problem.layout, problem.net
    nb = lay.nb
    x = lay.full(x_free)
    pg, qg, vm, va = _split(problem, x)
    v = vm * np.exp(1j * va)
    nf = lay.n_full
    hess = np.zeros((nf, nf))
    ipg = np.arange(nf)[lay.pg]
    hess[ipg, ipg] = 2 * net.c2

    gaa, gav, gva, gvv = d2sbus_dv2(net.ybus, v, lam[:nb])
    qaa, qav, qva, qvv = d2sbus_dv2(net.ybus, v, lam[nb:])
    haa = gaa.real + qaa.imag
    hav = gav.real + qav.imag
    hva = gva.real + qva.imag
    hvv = gvv.real + qvv.imag

    nlim = lay.limited.size
    if nlim:
        for k, (ybr, idx, cbr) in enumerate(((net.yf_lim, net.f_lim, net.cf_lim),
                                             (net.yt_lim, net.t_lim, net.ct_lim))):
            m = mu[k * nlim:(k + 1) * nlim]
            da, dm, sbr = dsbr_dv(ybr, idx, v)
            baa, bav, bva, bvv = d2asbr_dv2(da, dm, sbr, cbr, ybr, v, m)
            haa += baa
            hav += bav
            hva += bva
            hvv += bvv
    hess[lay.va, lay.va] = haa
    hess[lay.va, lay.vm] = hav
    hess[lay.vm, lay.va] = hva
    hess[lay.vm, lay.vm] = hvv
    free = lay.free
    return hess[np.ix_(free, free)]


# --------------------------------------------------------------------------
# state

def initial_state(problem: OpfProblem, x0: np.ndarray, options: SolverOptions = DEFAULT_OPTIONS) -> NewtonState:
    """Deterministic ``Z0`` from a full primal initial point ``x0``."""
    lay = problem.layout
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (lay.n_full,):
        raise ValueError(f"initial point must have {lay.n_full} entries, got {x0.shape}")
    if np.any(x0[lay.vm] <= 0):
        raise ValueError("initial voltage magnitudes must be positive")
    xf = x0[lay.free].copy()
    ev = evaluate(problem, xf)
    s = np.maximum(-ev.h, options.slack_floor)
    mu = np.full(lay.n_ineq, options.mu0)
    lam = np.zeros(lay.n_eq)
    return NewtonState(z=np.concatenate([xf, lam, mu, s]), barrier_mu=options.gamma0)


def _parts(problem: OpfProblem, z: np.ndarray):
    lay = problem.layout
    return z[lay.z_x], z[lay.z_lam], z[lay.z_mu], z[lay.z_s]


def barrier_lagrangian(problem: OpfProblem, state: NewtonState) -> float:
    x, lam, mu, s = _parts(problem, state.z)
    ev = evaluate(problem, x)
    return float(ev.f + lam @ ev.g + mu @ (ev.h + s) - state.barrier_mu * np.sum(np.log(s)))


def _kkt_from_eval(problem, state, ev: _Eval) -> KktEvaluation:
    x, lam, mu, s = _parts(problem, state.z)
    lx = ev.df + ev.jg.T @ lam + ev.jh.T @ mu
    grad = np.concatenate([lx, ev.g, ev.h + s, mu - state.barrier_mu / s])

    def nrm(a):
        return float(np.max(np.abs(a))) if a.size else 0.0

    return KktEvaluation(gradient=grad, stationarity=nrm(lx), eq_feasibility=nrm(ev.g),
                         ineq_feasibility=nrm(ev.h + s), complementarity=nrm(s * mu - state.barrier_mu))


def eval_kkt(problem: OpfProblem, state: NewtonState) -> KktEvaluation:
    """Gradient of the barrier Lagrangian in ``Z`` and KKT residual norms by block."""
    if state.z.shape != (problem.layout.n_z,):
        raise ValueError("state does not match the problem layout")
    return _kkt_from_eval(problem, state, evaluate(problem, state.z[problem.layout.z_x]))


def lagrangian_hessian(problem: OpfProblem, state: NewtonState) -> np.ndarray:
    """Exact Hessian of the barrier Lagrangian in ``Z``."""
    lay = problem.layout
    x, lam, mu, s = _parts(problem, state.z)
    ev = evaluate(problem, x)
    n, m, p = lay.n_primal, lay.n_eq, lay.n_ineq
    hxx = hessian_x(problem, x, lam, mu)
    k = np.zeros((lay.n_z, lay.n_z))
    zx, zl, zm, zs = lay.z_x, lay.z_lam, lay.z_mu, lay.z_s
    k[zx, zx] = hxx
    k[zx, zl] = ev.jg.T
    k[zl, zx] = ev.jg
    k[zx, zm] = ev.jh.T
    k[zm, zx] = ev.jh
    k[zm, zs] = np.eye(p)
    k[zs, zm] = np.eye(p)
    k[zs, zs] = np.diag(state.barrier_mu / (s * s))
    assert k.shape == (n + m + 2 * p, n + m + 2 * p)
    return k


# --------------------------------------------------------------------------
# linear algebra

def newton_direction(hessian: np.ndarray, gradient: np.ndarray, n_primal: int | None = None,
                     options: SolverOptions = DEFAULT_OPTIONS) -> np.ndarray:
    """Solve ``hessian @ d = -gradient`` for a symmetric (indefinite) matrix.

    Uses a symmetrically equilibrated LDL^T (Bunch-Kaufman) factorization.
    On failure (singular pivot, ill-conditioning, non-finite result or
    backward error above ``solve_tol``) ``delta`` is added to the first
    ``n_primal`` diagonal entries and subtracted from the rest, starting at
    ``reg_start`` and doubling up to ``reg_max``. Raises :class:`StepFailure`
    when that is exhausted.
    """
    k = np.asarray(hessian, dtype=float)
    r = -np.asarray(gradient, dtype=float)
    n = k.shape[0]
    n_primal = n if n_primal is None else n_primal
    signs = np.where(np.arange(n) < n_primal, 1.0, -1.0)
    delta = 0.0
    while True:
        kk = k + np.diag(delta * signs) if delta else k
        d = _try_solve(kk, r, options.solve_tol)
        if d is not None:
            return d
        delta = options.reg_start if delta == 0.0 else 2.0 * delta
        if delta > options.reg_max:
            raise StepFailure("KKT matrix singular after regularization")


def _try_solve(k: np.ndarray, r: np.ndarray, tol: float) -> np.ndarray | None:
    rowmax = np.max(np.abs(k), axis=1)
    if not np.all(np.isfinite(rowmax)):
        return None
    scale = np.where(rowmax > 0, 1.0 / np.sqrt(np.where(rowmax > 0, rowmax, 1.0)), 1.0)
    ks = scale[:, None] * k * scale[None, :]
    with warnings.catch_warnings():
        warnings.simplefilter("error", sla.LinAlgWarning)
        try:
            y = sla.solve(ks, scale * r, assume_a="sym", check_finite=False)
        except (np.linalg.LinAlgError, sla.LinAlgWarning, ValueError):
            return None
    d = scale * y
    if not np.all(np.isfinite(d)):
        return None
    res = k @ d - r
    denom = np.max(np.abs(k)) * np.max(np.abs(d), initial=0.0) + np.max(np.abs(r), initial=0.0)
    if denom > 0 and np.max(np.abs(res), initial=0.0) / denom > tol:
        return None
    return d


def _reduced_step(problem: OpfProblem, state: NewtonState, ev: _Eval, options: SolverOptions) -> np.ndarray:
    lay = problem.layout
    x, lam, mu, s = _parts(problem, state.z)
    gamma = state.barrier_mu
    lx = ev.df + ev.jg.T @ lam + ev.jh.T @ mu
    hxx = hessian_x(problem, x, lam, mu)
    jh_s = ev.jh.T / s[None, :]
    m = hxx + (jh_s * mu[None, :]) @ ev.jh
    nvec = lx + jh_s @ (mu * ev.h + gamma)
    n, neq = lay.n_primal, lay.n_eq
    kkt = np.zeros((n + neq, n + neq))
    kkt[:n, :n] = m
    kkt[:n, n:] = ev.jg.T
    kkt[n:, :n] = ev.jg
    d = newton_direction(kkt, np.concatenate([nvec, ev.g]), n_primal=n, options=options)
    dx, dlam = d[:n], d[n:]
    ds = -ev.h - s - ev.jh @ dx
    dmu = -mu + (gamma - mu * ds) / s
    return np.concatenate([dx, dlam, dmu, ds])


def newton_step(problem: OpfProblem, state: NewtonState, options: SolverOptions = DEFAULT_OPTIONS) -> np.ndarray:
    """Primal-dual Newton direction ``dZ`` at ``state`` (raises StepFailure)."""
    return _reduced_step(problem, state, evaluate(problem, state.z[problem.layout.z_x]), options)


def _fraction_to_boundary(v: np.ndarray, dv: np.ndarray, tau: float) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, tau * np.min(-v[neg] / dv[neg])))


# --------------------------------------------------------------------------
# driver

def solve_opf(problem: OpfProblem, x0: np.ndarray, options: SolverOptions = DEFAULT_OPTIONS) -> OpfOutcome:
    """Run the interior-point iteration from the full primal point ``x0``.

    Non-convergence is reported in the outcome (``converged=False``) with the
    last iterate as the solution.
    """
    lay = problem.layout
    state = initial_state(problem, x0, options)
    digest = hashlib.sha256()
    digest.update(state.z.tobytes())
    trace: list[dict] = []
    message = "iteration limit"
    converged = False
    feas = grad = comp = np.inf
    p = lay.n_ineq
    for t in range(options.max_iter + 1):
        x, lam, mu, s = _parts(problem, state.z)
        ev = evaluate(problem, x)
        lx = ev.df + ev.jg.T @ lam + ev.jh.T @ mu
        feas = max(np.max(np.abs(ev.g), initial=0.0), np.max(ev.h, initial=0.0))
        dual_scale = 1.0 + max(np.max(np.abs(lam), initial=0.0), np.max(np.abs(mu), initial=0.0))
        grad = float(np.max(np.abs(lx), initial=0.0) / dual_scale)
        comp = float(s @ mu)
        if options.trace:
            trace.append({"iteration": t, "alpha": state.alpha, "alpha_dual": state.alpha_dual,
                          "barrier": state.barrier_mu, "feasibility": float(feas), "stationarity": grad,
                          "complementarity": comp, "objective": ev.f})
        if not (np.isfinite(feas) and np.isfinite(grad) and np.isfinite(comp)):
            message = "numerical failure (non-finite iterate)"
            break
        if feas <= options.feas_tol and grad <= options.grad_tol and comp <= options.comp_tol:
            converged = True
            message = "converged"
            break
        if t == options.max_iter:
            break
        try:
            dz = _reduced_step(problem, state, ev, options)
        except StepFailure as exc:
            message = str(exc)
            break
        dx, dlam, dmu, ds = _parts(problem, dz)
        ap = _fraction_to_boundary(s, ds, options.step_fraction)
        ad = _fraction_to_boundary(mu, dmu, options.step_fraction)
        z = state.z.copy()
        z[lay.z_x] += ap * dx
        z[lay.z_s] += ap * ds
        z[lay.z_lam] += ad * dlam
        z[lay.z_mu] += ad * dmu
        _, _, mu_new, s_new = _parts(problem, z)
        gamma = state.barrier_mu
        if p:
            gamma = min(gamma, options.sigma * float(s_new @ mu_new) / p)
        state = NewtonState(z=z, barrier_mu=gamma, t=t + 1, alpha=ap, alpha_dual=ad)
        digest.update(z.tobytes())
        if np.max(np.abs(z[lay.z_x])) > 1e8:
            message = "diverged"
            break
    return _outcome(problem, state, converged, message, float(feas), max(grad, comp), digest.hexdigest(), trace)


def _outcome(problem, state, converged, message, feas, kkt, digest, trace) -> OpfOutcome:
    lay = problem.layout
    x, lam, mu, s = _parts(problem, state.z)
    xf = lay.full(x)
    pg, qg, vm, va = (a.copy() for a in _split(problem, xf))
    return OpfOutcome(
        p_g=pg, q_g=qg, voltages=VoltageProfile(vm, va),
        objective=objective_pu(problem.case, pg) if np.all(np.isfinite(pg)) else float("nan"),
        converged=converged, iterations=state.t, kkt_residual=kkt, feasibility=feas,
        trajectory_digest=digest, multipliers=_named_multipliers(problem, mu), lam=lam.copy(),
        message=message, trace=trace,
    )


def _named_multipliers(problem: OpfProblem, mu: np.ndarray) -> dict[str, np.ndarray]:
    """Inequality multipliers mapped back to physical constraint names."""
    lay = problem.layout
    nl = problem.case.n_branch
    nlim = lay.limited.size
    out = {"branch_from": np.zeros(nl), "branch_to": np.zeros(nl)}
    out["branch_from"][lay.limited] = mu[:nlim]
    out["branch_to"][lay.limited] = mu[nlim:2 * nlim]
    full_lo = np.zeros(lay.n_full)
    full_up = np.zeros(lay.n_full)
    nlo = lay.lower_idx.size
    full_lo[lay.free[lay.lower_idx]] = mu[2 * nlim:2 * nlim + nlo]
    full_up[lay.free[lay.upper_idx]] = mu[2 * nlim + nlo:]
    for name, sl in (("pg", lay.pg), ("qg", lay.qg), ("vm", lay.vm)):
        out[f"{name}_lower"] = full_lo[sl].copy()
        out[f"{name}_upper"] = full_up[sl].copy()
    return out
