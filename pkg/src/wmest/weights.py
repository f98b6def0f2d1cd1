"""Per-cluster weights minimising ``det(Sigma_hat(w))``.

The sandwich is unchanged by a common rescaling of the weights, so the
search runs over log-weights and projects back onto
``{w >= floor, sum_i m_i w_i = N}`` after every sweep.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize

from .asymptotics import ClusterStatistics
from .model import ClusteredSample, EstimatorFamily

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WeightOptions:
    floor: float = 1e-6
    tol: float = 1e-12
    max_sweeps: int = 500
    nelder_mead: bool = True
    group_ties: bool = True


@dataclass(frozen=True)
class WeightOptimizationResult:
    weights: np.ndarray
    sizes: np.ndarray
    objective: float
    unweighted_objective: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list, repr=False)

    @property
    def N(self) -> int:
        return int(self.sizes.sum())


def normalize(w, sizes, floor: float = 0.0) -> np.ndarray:
    """Project onto ``sum m_i w_i = N`` with ``w_i >= floor``."""
    sizes = np.asarray(sizes, dtype=float)
    N = sizes.sum()
    w = np.asarray(w, dtype=float) * (N / np.dot(sizes, w))
    if floor > 0 and np.any(w < floor):
        for _ in range(50):
            low = w <= floor
            w = np.where(low, floor, w)
            free = ~low
            rest = N - floor * sizes[low].sum()
            w[free] *= rest / np.dot(sizes[free], w[free])
            if np.all(w >= floor - 1e-15):
                break
    return w


def closed_form_weights(sizes, tau: float) -> np.ndarray:
    """Variance-optimal weights when every cluster has ``C_i = tau * B``.

    Lagrange conditions give ``w_i`` proportional to ``1 / (1 + (m_i - 1) tau)``.
    """
    if not 0.0 <= tau < 1.0:
        raise ValueError("tau must lie in [0, 1)")
    sizes = np.asarray(sizes, dtype=float)
    if sizes.size == 0 or np.any(sizes < 1):
        raise ValueError("cluster sizes must be >= 1")
    raw = 1.0 / (1.0 + (sizes - 1.0) * tau)
    return raw * sizes.sum() / np.dot(sizes, raw)


def _group_means(w, sizes):
    out = np.array(w, dtype=float)
    for m in np.unique(sizes):
        sel = sizes == m
        out[sel] = w[sel].mean()
    return out


def optimize_weights_stats(stats: ClusterStatistics, opts: WeightOptions | None = None) -> WeightOptimizationResult:
    opts = opts or WeightOptions()
    sizes = np.asarray(stats.sizes)
    n = sizes.size
    if n < 2:
        raise ValueError("weight optimisation needs at least two clusters")

    def f_log(u):
        return stats.log_det_sigma(np.exp(u - u.max()))

    w0 = np.ones(n)
    f_unweighted = stats.log_det_sigma(w0)
    u = np.zeros(n)
    fu = f_unweighted
    trace = [float(np.exp(fu))]
    lo, hi = np.log(opts.floor), np.log(sizes.sum())
    converged = False
    sweeps = 0
    for sweeps in range(1, opts.max_sweeps + 1):
        f_start = fu
        for i in range(n):
            def fi(t, i=i):
                v = u.copy()
                v[i] = t
                return f_log(v)

            res = optimize.minimize_scalar(
                fi, bounds=(min(lo, u[i] - 1), max(hi, u[i] + 1)), method="bounded",
                options={"xatol": 1e-10},
            )
            if res.fun < fu:
                u[i] = res.x
                fu = res.fun
        w = normalize(np.exp(u - u.max()), sizes, opts.floor)
        u = np.log(w)
        fu = f_log(u)
        trace.append(float(np.exp(fu)))
        if abs(f_start - fu) <= opts.tol * max(1.0, abs(fu)):
            converged = True
            break

    if opts.nelder_mead:
        # cross-check from the coordinate-descent point
        nm = optimize.minimize(
            f_log, u, method="Nelder-Mead",
            options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000 * n, "adaptive": True},
        )
        if nm.fun < fu - 1e-12 * max(1.0, abs(fu)):
            log.debug("Nelder-Mead improved log det from %.15g to %.15g", fu, nm.fun)
            u = np.log(normalize(np.exp(nm.x - nm.x.max()), sizes, opts.floor))
            fu = f_log(u)
            trace.append(float(np.exp(fu)))

    w = normalize(np.exp(u), sizes, opts.floor)
    if opts.group_ties:
        wg = normalize(_group_means(w, sizes), sizes, opts.floor)
        if stats.log_det_sigma(wg) <= f_unweighted:
            w = wg
    fw = stats.log_det_sigma(w)
    if fw > f_unweighted:
        # never worse than no weighting
        w, fw = w0, f_unweighted
    return WeightOptimizationResult(
        weights=w,
        sizes=sizes,
        objective=float(np.exp(fw)),
        unweighted_objective=float(np.exp(f_unweighted)),
        iterations=sweeps,
        converged=converged,
        trace=trace,
    )


def optimize_weights(
    sample: ClusteredSample | Sequence[ClusteredSample],
    fam: EstimatorFamily,
    a,
    opts: WeightOptions | None = None,
) -> WeightOptimizationResult:
    """Optimal per-cluster weights for ``fam`` with the sandwich evaluated at ``a``.

    A sequence of samples with a common cluster layout is pooled: the
    per-cluster statistics are averaged before optimising.
    """
    samples = [sample] if isinstance(sample, ClusteredSample) else list(sample)
    stats = [ClusterStatistics.from_sample(s, fam, a) for s in samples]
    pooled = stats[0] if len(stats) == 1 else ClusterStatistics.pooled(stats)
    return optimize_weights_stats(pooled, opts)
