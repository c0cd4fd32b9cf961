"""Root finding for the capacity constraint ``sum_m p_in(m; T) = C``."""
from __future__ import annotations

import math

from scipy.optimize import brentq

__all__ = ["ConvergenceError", "UnsupportedCombination", "solve_capacity"]


class ConvergenceError(RuntimeError):
    """A fixed point or root search did not reach its tolerance."""

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(f"{message} (residual={residual:.3g}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


class UnsupportedCombination(ValueError):
    """The requested policy/traffic pair has no model."""


def solve_capacity(occupancy_sum, C, *, tol=1e-6, guess=None, max_iter=500):
    """Find ``T > 0`` with ``occupancy_sum(T) == C``.

    ``occupancy_sum`` must be increasing in ``T`` with value 0 at 0.  The
    root is bracketed by doubling (or halving from ``guess``) and refined by
    Brent's method.  Returns ``(T, residual, evaluations)``; raises
    :class:`ConvergenceError` if ``|occupancy_sum(T) - C| > tol * C``.
    """
    evals = 0

    def f(T):
        nonlocal evals
        evals += 1
        return occupancy_sum(T) - C

    lo = 0.0
    hi = guess if guess and guess > 0 and math.isfinite(guess) else 1.0
    fhi = f(hi)
    if fhi < 0:
        while fhi < 0:
            lo = hi
            hi *= 2.0
            if not math.isfinite(hi) or evals > 4 * max_iter:
                raise ConvergenceError("capacity cannot be reached", -fhi, evals)
            fhi = f(hi)
    elif guess:
        while True:
            cand = hi / 2.0
            if cand < 1e-300:
                break
            fc = f(cand)
            if fc < 0:
                lo = cand
                break
            hi, fhi = cand, fc
    if fhi == 0:
        return hi, 0.0, evals
    T = brentq(f, lo, hi, xtol=1e-300, rtol=4 * 2.220446049250313e-16, maxiter=max_iter)
    residual = abs(f(T))
    if residual > tol * C:
        raise ConvergenceError("capacity constraint not met", residual, evals)
    return T, residual, evals
