"""Finite-sample replacement breakdown point of weighted estimators.

An adversary replacing ``k`` observations gains control once the replaced
weights reach ``eps * N``; the cheapest choice is always the ``k`` largest
weights, so everything reduces to prefix sums of the sorted weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

# prefix sums within this distance of the threshold count as reaching it
BOUNDARY_TOL = 1e-9


@dataclass(frozen=True)
class BreakdownReport:
    k_star: int
    N: int
    epsilon_star: Fraction
    bracket: tuple
    threshold_used: float
    prefix_sum_at_k: float

    @property
    def percent(self) -> float:
        return 100.0 * float(self.epsilon_star)


def expand_cluster_weights(weights, sizes) -> np.ndarray:
    """Repeat each cluster weight ``m_i`` times."""
    weights = np.asarray(weights, dtype=float)
    sizes = np.asarray(sizes, dtype=int)
    if weights.shape != sizes.shape:
        raise ValueError("one weight per cluster size required")
    return np.repeat(weights, sizes)


def _validate(weights):
    w = np.asarray(weights, dtype=float).ravel()
    if w.size == 0 or np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weights must be finite and strictly positive")
    N = w.size
    if abs(w.sum() - N) > 1e-9 * max(1.0, N):
        raise ValueError(f"weights must sum to N={N}, got {w.sum():.12g}")
    return w


def _check_eps(eps):
    if not 0.0 < eps <= 1.0:
        raise ValueError(f"breakdown fraction must lie in (0, 1], got {eps}")


def _k_for(sorted_cumsum, threshold):
    hits = np.nonzero(sorted_cumsum >= threshold - BOUNDARY_TOL)[0]
    # the full sum is N >= threshold, so hits is never empty for eps <= 1
    return int(hits[0]) + 1


def breakdown_exact(weights, eps_star: float) -> BreakdownReport:
    """Smallest ``k`` whose ``k`` largest weights sum to at least ``eps_star * N``."""
    _check_eps(eps_star)
    w = _validate(weights)
    N = w.size
    cs = np.cumsum(np.sort(w)[::-1])
    thr = eps_star * N
    k = _k_for(cs, thr)
    return BreakdownReport(k, N, Fraction(k, N), (k, k), thr, float(cs[k - 1]))


def breakdown_bracket(weights, eps_lower: float, eps_upper: float) -> tuple:
    """``(k1, k0)`` from the thresholds ``eps_lower * N`` and ``eps_upper * N``."""
    _check_eps(eps_lower)
    _check_eps(eps_upper)
    if eps_lower > eps_upper:
        raise ValueError("eps_lower must not exceed eps_upper")
    w = _validate(weights)
    N = w.size
    cs = np.cumsum(np.sort(w)[::-1])
    return _k_for(cs, eps_lower * N), _k_for(cs, eps_upper * N)


def spatial_median_eps(N: int) -> Fraction:
    """Finite-sample breakdown point of the unweighted spatial median."""
    if N < 1:
        raise ValueError("N must be >= 1")
    return Fraction((N - 1) // 2, N)


def weighted_breakdown(weights, eps_asymptotic: float = 0.5, eps_finite: float | None = None) -> BreakdownReport:
    """Breakdown report with both bracket ends filled in.

    ``eps_finite`` defaults to the spatial-median value for ``N``; the exact
    count uses ``eps_asymptotic``.
    """
    w = _validate(weights)
    N = w.size
    if eps_finite is None:
        eps_finite = float(spatial_median_eps(N))
    rep = breakdown_exact(w, eps_asymptotic)
    if eps_finite <= 0:
        k1 = 1
    else:
        k1, _ = breakdown_bracket(w, min(eps_finite, eps_asymptotic), eps_asymptotic)
    return BreakdownReport(rep.k_star, N, rep.epsilon_star, (k1, rep.k_star), rep.threshold_used, rep.prefix_sum_at_k)
