"""Admittance matrices, bus injections, branch flows and Newton power flow.

Branch model: standard pi-model, off-nominal tap on the from side, no phase
shift. For a branch with series admittance ``ys = 1/(r + jx)``, total
charging ``b`` and tap ``a``::

    Yff = (ys + jb/2) / a**2     Yft = -ys / a
    Ytf = -ys / a                Ytt =  ys + jb/2

Bus shunts enter the diagonal as ``(Gs + jBs) / base_mva``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from augopf.case import BusType, NetworkCase


@dataclass(frozen=True, eq=False)
class AdmittanceMatrix:
    """Bus admittance ``ybus`` plus branch rows ``yf``/``yt`` so that the
    from/to end currents are ``yf @ V`` and ``yt @ V``."""

    n: int
    ybus: sp.csr_matrix
    yf: sp.csr_matrix
    yt: sp.csr_matrix
    f: np.ndarray
    t: np.ndarray

    def dense(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.ybus.toarray(), self.yf.toarray(), self.yt.toarray()


@dataclass(frozen=True, eq=False)
class VoltageProfile:
    vm: np.ndarray
    va: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vm", np.asarray(self.vm, dtype=float))
        object.__setattr__(self, "va", np.asarray(self.va, dtype=float))
        if self.vm.shape != self.va.shape:
            raise ValueError("vm and va must have the same shape")

    @property
    def complex(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)

    @classmethod
    def flat(cls, n: int, vm: float = 1.0) -> VoltageProfile:
        return cls(np.full(n, vm), np.zeros(n))

    @classmethod
    def from_complex(cls, v: np.ndarray) -> VoltageProfile:
        return cls(np.abs(v), np.angle(v))

    def __eq__(self, other):
        if not isinstance(other, VoltageProfile):
            return NotImplemented
        return np.array_equal(self.vm, other.vm) and np.array_equal(self.va, other.va)


@dataclass
class PowerFlowSolution:
    voltages: VoltageProfile
    p_inj: np.ndarray
    q_inj: np.ndarray
    iterations: int
    converged: bool
    max_mismatch: float
    singular: bool = False


def build_admittance(case: NetworkCase) -> AdmittanceMatrix:
    a = case.arrays
    nb, nl = case.n_bus, case.n_branch
    if nl and np.any((a.r == 0) & (a.x == 0)):
        bad = int(np.flatnonzero((a.r == 0) & (a.x == 0))[0])
        raise ValueError(f"branch {bad} has zero impedance (r = x = 0)")
    ys = 1.0 / (a.r + 1j * a.x) if nl else np.zeros(0, complex)
    ytt = ys + 0.5j * a.b
    yff = ytt / (a.tap * a.tap)
    yft = -ys / a.tap
    ytf = -ys / a.tap
    rows = np.concatenate([np.arange(nl), np.arange(nl)])
    yf = sp.csr_matrix((np.concatenate([yff, yft]), (rows, np.concatenate([a.f, a.t]))), shape=(nl, nb))
    yt = sp.csr_matrix((np.concatenate([ytf, ytt]), (rows, np.concatenate([a.f, a.t]))), shape=(nl, nb))
    cf = sp.csr_matrix((np.ones(nl), (np.arange(nl), a.f)), shape=(nl, nb))
    ct = sp.csr_matrix((np.ones(nl), (np.arange(nl), a.t)), shape=(nl, nb))
    ysh = (a.gs + 1j * a.bs)
    ybus = (cf.T @ yf + ct.T @ yt + sp.diags(ysh)).tocsr()
    ybus.sum_duplicates()
    ybus.sort_indices()
    return AdmittanceMatrix(n=nb, ybus=ybus, yf=yf, yt=yt, f=np.array(a.f), t=np.array(a.t))


def bus_injections(v: VoltageProfile, y: AdmittanceMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Net p.u. injections ``P_i + jQ_i = V_i conj(sum_j Y_ij V_j)`` in polar form."""
    if v.vm.shape != (y.n,):
        raise ValueError(f"voltage profile has {v.vm.size} buses, admittance has {y.n}")
    coo = y.ybus.tocoo()
    i, j = coo.row, coo.col
    g, b = coo.data.real, coo.data.imag
    th = v.va[i] - v.va[j]
    w = v.vm[i] * v.vm[j]
    p = np.bincount(i, weights=w * (g * np.cos(th) + b * np.sin(th)), minlength=y.n)
    q = np.bincount(i, weights=w * (g * np.sin(th) - b * np.cos(th)), minlength=y.n)
    return p, q


def bus_injections_rect(v: VoltageProfile, y: AdmittanceMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Rectangular complex evaluation, kept as an independent cross-check."""
    vc = v.complex
    s = vc * np.conj(y.ybus @ vc)
    return s.real, s.imag


def branch_power(v: VoltageProfile, y: AdmittanceMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Complex p.u. power entering each branch at its from and to ends."""
    vc = v.complex
    return vc[y.f] * np.conj(y.yf @ vc), vc[y.t] * np.conj(y.yt @ vc)


def branch_flows(v: VoltageProfile, case: NetworkCase, y: AdmittanceMatrix | None = None):
    """Apparent-power magnitudes ``(|S_from|, |S_to|)`` per branch in p.u."""
    y = y if y is not None else build_admittance(case)
    sf, st = branch_power(v, y)
    return np.abs(sf), np.abs(st)


def branch_limit_violations(v: VoltageProfile, case: NetworkCase, y: AdmittanceMatrix | None = None,
                            tol: float = 0.0) -> np.ndarray:
    """Boolean per branch; limits of 0 are unlimited and never violated."""
    ff, ft = branch_flows(v, case, y)
    smax = case.arrays.smax
    return (smax > 0) & (np.maximum(ff, ft) > smax + tol)


# --------------------------------------------------------------------------
# first derivatives (dense), shared with the OPF solver

def dsbus_dv(ybus: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of complex bus injections w.r.t. angle and magnitude."""
    ibus = ybus @ v
    vnorm = v / np.abs(v)
    ds_dvm = v[:, None] * np.conj(ybus * vnorm[None, :]) + np.diag(np.conj(ibus) * vnorm)
    ds_dva = 1j * v[:, None] * np.conj(np.diag(ibus) - ybus * v[None, :])
    return ds_dva, ds_dvm


def dsbr_dv(ybr: np.ndarray, idx: np.ndarray, v: np.ndarray):
    """Derivatives of branch-end complex power ``S = V[idx] conj(ybr V)``.

    Returns ``(dS_dva, dS_dvm, S)``.
    """
    nl, nb = ybr.shape
    ibr = ybr @ v
    vnorm = v / np.abs(v)
    vbr = v[idx]
    rows = np.arange(nl)
    cv = np.zeros((nl, nb), complex)
    cv[rows, idx] = vbr
    cvn = np.zeros((nl, nb), complex)
    cvn[rows, idx] = vnorm[idx]
    ds_dva = 1j * (np.conj(ibr)[:, None] * cv - vbr[:, None] * np.conj(ybr * v[None, :]))
    ds_dvm = vbr[:, None] * np.conj(ybr * vnorm[None, :]) + np.conj(ibr)[:, None] * cvn
    return ds_dva, ds_dvm, vbr * np.conj(ibr)


# --------------------------------------------------------------------------
# Newton power flow

def solve_powerflow(
    case: NetworkCase,
    load: tuple[np.ndarray, np.ndarray],
    start: VoltageProfile,
    generation: tuple[np.ndarray, np.ndarray] | None = None,
    pv_buses: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 50,
) -> PowerFlowSolution:
    """Polar Newton-Raphson on the bus mismatch equations.

    ``load`` and ``generation`` are per-bus ``(P, Q)`` p.u. arrays. The slack
    bus keeps the magnitude and angle of ``start``; PV buses (from the case
    unless ``pv_buses`` is given) keep its magnitude.
    """
    if np.any(start.vm <= 0):
        raise ValueError("start voltage magnitudes must be positive")
    n = case.n_bus
    pd, qd = (np.asarray(x, dtype=float) for x in load)
    pg, qg = (np.zeros(n), np.zeros(n)) if generation is None else (np.asarray(x, float) for x in generation)
    s_spec = (pg - pd) + 1j * (qg - qd)

    slack = case.slack
    if pv_buses is None:
        pv = np.array([b.id for b in case.buses if b.bus_type is BusType.PV], dtype=np.intp)
    else:
        pv = np.asarray(pv_buses, dtype=np.intp)
    pq = np.setdiff1d(np.arange(n), np.concatenate([pv, [slack]]))
    pvpq = np.concatenate([pv, pq])

    ybus = build_admittance(case).ybus.toarray()
    v = start.complex.astype(complex)
    vm, va = np.abs(v), np.angle(v)

    def mismatch(v):
        s = v * np.conj(ybus @ v) - s_spec
        return np.concatenate([s.real[pvpq], s.imag[pq]])

    f = mismatch(v)
    err = float(np.max(np.abs(f))) if f.size else 0.0
    it = 0
    singular = False
    while err > tol and it < max_iter:
        ds_dva, ds_dvm = dsbus_dv(ybus, v)
        jac = np.block([
            [ds_dva[np.ix_(pvpq, pvpq)].real, ds_dvm[np.ix_(pvpq, pq)].real],
            [ds_dva[np.ix_(pq, pvpq)].imag, ds_dvm[np.ix_(pq, pq)].imag],
        ])
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            singular = True
            break
        if not np.all(np.isfinite(dx)):
            singular = True
            break
        it += 1
        va[pvpq] += dx[: pvpq.size]
        vm[pq] += dx[pvpq.size:]
        v = vm * np.exp(1j * va)
        f = mismatch(v)
        err = float(np.max(np.abs(f)))
        if not np.isfinite(err):
            break
    prof = VoltageProfile(vm.copy(), va.copy())
    s = v * np.conj(ybus @ v)
    return PowerFlowSolution(voltages=prof, p_inj=s.real, q_inj=s.imag, iterations=it,
                             converged=bool(err <= tol), max_mismatch=err, singular=singular)


def dump_ybus(y: AdmittanceMatrix, path: str | Path) -> None:
    """Write ``row col real imag`` triplets (0-based) for fixtures."""
    coo = y.ybus.tocoo()
    order = np.lexsort((coo.col, coo.row))
    lines = [f"# n={y.n}"]
    for k in order:
        z = coo.data[k]
        lines.append(f"{coo.row[k]} {coo.col[k]} {float(z.real)!r} {float(z.imag)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
