"""Independent KKT certificate for solver outcomes.

Constraint values are recomputed through :mod:`augopf.powerflow` (polar
injections and branch flows), never from the solver's own residuals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from augopf.case import NetworkCase
from augopf.powerflow import branch_flows, build_admittance, bus_injections


@dataclass
class CertificateReport:
    balance: float
    bounds: float
    branch: float
    complementarity: float
    dual_feasible: bool
    feas_tol: float
    comp_tol: float

    @property
    def feasible(self) -> bool:
        return max(self.balance, self.bounds, self.branch) <= self.feas_tol

    @property
    def ok(self) -> bool:
        return self.feasible and self.complementarity <= self.comp_tol and self.dual_feasible


def check_certificate(case: NetworkCase, load, outcome, feas_tol: float = 1e-6,
                      comp_tol: float = 1e-8) -> CertificateReport:
    a = case.arrays
    pd, qd = (np.asarray(x, float) for x in load)
    y = build_admittance(case)
    v = outcome.voltages
    p_inj, q_inj = bus_injections(v, y)
    pg_bus = np.bincount(a.gen_bus, weights=outcome.p_g, minlength=case.n_bus)
    qg_bus = np.bincount(a.gen_bus, weights=outcome.q_g, minlength=case.n_bus)
    balance = max(np.max(np.abs(p_inj - pg_bus + pd)), np.max(np.abs(q_inj - qg_bus + qd)))

    pairs = {
        "pg": (outcome.p_g, a.pmin, a.pmax),
        "qg": (outcome.q_g, a.qmin, a.qmax),
        "vm": (v.vm, a.vmin, a.vmax),
    }
    bounds = 0.0
    comp = 0.0
    duals_ok = True
    mult = outcome.multipliers
    for name, (val, lo, hi) in pairs.items():
        if val.size == 0:
            continue
        bounds = max(bounds, np.max(lo - val, initial=0.0), np.max(val - hi, initial=0.0))
        mlo, mhi = mult.get(f"{name}_lower"), mult.get(f"{name}_upper")
        if mlo is not None:
            duals_ok &= bool(np.all(mlo >= 0) and np.all(mhi >= 0))
            comp = max(comp, np.max(np.abs(mlo * (val - lo))), np.max(np.abs(mhi * (hi - val))))
    slack_angle = abs(float(v.va[case.slack]))
    bounds = max(bounds, slack_angle)

    branch = 0.0
    if case.n_branch:
        ff, ft = branch_flows(v, case, y)
        lim = a.smax > 0
        if np.any(lim):
            smax2 = a.smax[lim] ** 2
            hf = ff[lim] ** 2 - smax2
            ht = ft[lim] ** 2 - smax2
            branch = max(0.0, float(np.max(hf)), float(np.max(ht)))
            mf, mt = mult.get("branch_from"), mult.get("branch_to")
            if mf is not None:
                duals_ok &= bool(np.all(mf >= 0) and np.all(mt >= 0))
                comp = max(comp, np.max(np.abs(mf[lim] * hf)), np.max(np.abs(mt[lim] * ht)))
    return CertificateReport(balance=float(balance), bounds=float(bounds), branch=float(branch),
                             complementarity=float(comp), dual_feasible=duals_ok,
                             feas_tol=feas_tol, comp_tol=comp_tol)
