"""Second derivatives of bus injections and squared branch flows (polar).

Each function returns the four blocks ``(aa, av, va, vv)`` of the Hessian of a
multiplier-weighted sum, with ``a`` = voltage angles and ``v`` = magnitudes;
``av`` has angle rows and magnitude columns.
"""

from __future__ import annotations

import numpy as np


def d2sbus_dv2(ybus: np.ndarray, v: np.ndarray, lam: np.ndarray):
    """Hessian blocks of ``lam^T S(V)`` with ``S = V conj(Ybus V)`` (complex)."""
    ibus = ybus @ v
    lv = lam * v
    b = ybus * v[None, :]
    c = lv[:, None] * np.conj(b)
    d = ybus.conj().T * v[None, :]
    e = np.conj(v)[:, None] * (d * lam[None, :] - np.diag(d @ lam))
    f = c - np.diag(lv * np.conj(ibus))
    g = 1.0 / np.abs(v)
    gaa = e + f
    gva = 1j * g[:, None] * (e - f)
    gav = gva.T
    gvv = g[:, None] * (c + c.T) * g[None, :]
    return gaa, gav, gva, gvv


def d2sbr_dv2(cbr: np.ndarray, ybr: np.ndarray, v: np.ndarray, lam: np.ndarray):
    """Hessian blocks of ``lam^T S_br(V)`` with ``S_br = (Cbr V) conj(Ybr V)``."""
    a = ybr.conj().T @ (lam[:, None] * cbr)
    b = np.conj(v)[:, None] * a * v[None, :]
    d = np.diag((a @ v) * np.conj(v))
    e = np.diag((a.T @ np.conj(v)) * v)
    f = b + b.T
    g = 1.0 / np.abs(v)
    haa = f - d - e
    hva = 1j * g[:, None] * (b - b.T - d + e)
    hav = hva.T
    hvv = g[:, None] * f * g[None, :]
    return haa, hav, hva, hvv


def d2asbr_dv2(ds_dva, ds_dvm, sbr, cbr, ybr, v, lam):
    """Hessian blocks of ``lam^T |S_br(V)|^2`` (real)."""
    saa, sav, sva, svv = d2sbr_dv2(cbr, ybr, v, np.conj(sbr) * lam)
    la = lam[:, None] * np.conj(ds_dva)
    lm = lam[:, None] * np.conj(ds_dvm)
    haa = 2 * (saa + ds_dva.T @ la).real
    hva = 2 * (sva + ds_dvm.T @ la).real
    hav = 2 * (sav + ds_dva.T @ lm).real
    hvv = 2 * (svv + ds_dvm.T @ lm).real
    return haa, hav, hva, hvv
