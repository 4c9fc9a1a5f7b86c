"""Independent reference computations used to freeze expected values.

Nothing here imports the package's solvers; these are direct numerical
integrations of the defining probabilities.
"""

from __future__ import annotations

import numpy as np


def grid_uniform(lo: float, hi: float, n: int = 4000) -> tuple[np.ndarray, float]:
    """Midpoint grid of a uniform law and the weight of each cell."""
    step = (hi - lo) / n
    return lo + step * (np.arange(n) + 0.5), 1.0 / n


def bisect(f, lo: float, hi: float, tol: float = 1e-10) -> float:
    """Root of a non-decreasing function ``f`` on ``[lo, hi]``."""
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def three_tier_capacity(m: float, level: float, hi: float = 10.0, n: int = 3000) -> float:
    """Quantile of ``X1 + X2`` given ``X2 > m`` at ``level``, X1, X2 iid U[0, hi], on a 2-D grid."""
    x, w = grid_uniform(0.0, hi, n)
    x1, x2 = np.meshgrid(x, x, indexing="ij")
    tail = x2 > m
    total = (x1 + x2)[tail]
    mass = tail.sum() * w * w

    def cdf_gap(c):
        return (total <= c).sum() * w * w / mass - level

    return bisect(cdf_gap, 0.0, 2 * hi, 1e-6)


def uniform_pair_conditional_mean(r: float, hi: float = 10.0, n: int = 4000) -> float:
    """``E[X1 | X1 + X2 = r]`` for X1, X2 iid U[0, hi] (integrating the joint density on the line)."""
    x, _ = grid_uniform(0.0, hi, n)
    inside = (r - x >= 0) & (r - x <= hi)
    return float(x[inside].mean())


def adversary_conditional_mean(r: float, n: int = 4000) -> float:
    """``E[X1 | S = r]`` for X1 ~ U[0,6], X2 = max(0, 12 - 2 X1) + Z, Z ~ U[0,1], S = X1 + X2.

    For each X1 on a grid, S - X1 - max(0, 12 - 2 X1) must equal Z, so the
    conditional density of X1 is proportional to the uniform density of Z
    at that point.
    """
    x1, _ = grid_uniform(0.0, 6.0, n)
    z = r - x1 - np.maximum(0.0, 12 - 2 * x1)
    weight = ((z >= 0) & (z <= 1)).astype(float)
    return float((x1 * weight).sum() / weight.sum())


def first_purchase_uniform_tail(c: float, hi: float = 10.0) -> float:
    """Pr(X > c) for X ~ U[0, hi]."""
    return min(1.0, max(0.0, 1 - c / hi))
