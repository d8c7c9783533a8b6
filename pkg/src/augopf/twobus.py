"""Closed-form voltages for a lossless two-bus line.

Bus 1 is the reference (``|V1|`` fixed), a line of reactance ``x`` feeds bus
2, and ``(P, Q)`` is the power received at bus 2. With ``u = |V2|^2``::

    u^2 - (|V1|^2 - 2 Q x) u + x^2 (P^2 + Q^2) = 0

which has two positive roots while the discriminant is non-negative.
:class:`TwoBusLine` also gives the voltage of the capped branch used by the
bundled bistable fixture, where the bus-1 reactive limit binds and
``|V2|^2 = |V1|^2 - x (Q + Qmax1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from augopf.case import NetworkCase


def line_roots(v1: float, x: float, p, q):
    """``(high, low)`` magnitudes of ``|V2|``; NaN where no real root exists."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    b = v1 * v1 - 2.0 * q * x
    disc = b * b - 4.0 * x * x * (p * p + q * q)
    with np.errstate(invalid="ignore"):
        r = np.sqrt(disc)
        hi = np.sqrt((b + r) / 2.0)
        lo = np.sqrt((b - r) / 2.0)
    bad = disc < 0
    return np.where(bad, np.nan, hi), np.where(bad, np.nan, lo)


@dataclass(frozen=True)
class TwoBusLine:
    v1: float
    x: float
    pd: float          # bus-2 active load, p.u.
    pg2_max: float     # cheapest bus-2 generation, p.u.
    qg1_max: float

    @classmethod
    def from_case(cls, case: NetworkCase) -> TwoBusLine:
        if case.n_bus != 2 or case.n_branch != 1:
            raise ValueError("expected a two-bus, single-line case")
        a = case.arrays
        if a.r[0] != 0 or a.b[0] != 0 or a.tap[0] != 1:
            raise ValueError("two-bus closed forms need a lossless, tap-free line")
        ref = case.slack
        other = 1 - ref
        if a.vmin[ref] != a.vmax[ref]:
            raise ValueError("reference bus magnitude must be fixed")
        at_ref = a.gen_bus == ref
        return cls(v1=float(a.vmin[ref]), x=float(a.x[0]), pd=float(a.pd[other]),
                   pg2_max=float(np.sum(a.pmax[~at_ref])), qg1_max=float(np.sum(a.qmax[at_ref])))

    def roots(self, qd, pd=None):
        """Both power-flow roots at the cheapest dispatch (bus-2 units at their cap)."""
        pd = self.pd if pd is None else pd
        return line_roots(self.v1, self.x, np.asarray(pd) - self.pg2_max, qd)

    def capped_branch(self, qd):
        """``|V2|`` when the bus-1 reactive limit binds."""
        with np.errstate(invalid="ignore"):
            return np.sqrt(self.v1 * self.v1 - self.x * (np.asarray(qd, dtype=float) + self.qg1_max))

    def branch_voltages(self, qd, pd=None):
        """``(low-cost, high-cost)`` branch magnitudes of ``|V2|``."""
        hi, _ = self.roots(qd, pd)
        return hi, self.capped_branch(qd)

    def threshold(self, qd, pd=None) -> float:
        """Midpoint of the two branch voltages; the branch classifier's cut."""
        hi, lo = self.branch_voltages(qd, pd)
        return float(0.5 * (hi + lo))
