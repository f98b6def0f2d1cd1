"""Weighted M-estimate: zero of the weighted estimating equation.

Mean is closed form.  The spatial median runs Weiszfeld iterations (with the
Vardi-Zhang correction when the iterate sits on a data point), accelerated by
safeguarded Newton steps.  Huber and Lp-median use Newton on the estimating
equation with backtracking on the objective, falling back to gradient descent
when the Jacobian is close to singular.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    TIE_TOL,
    ClusteredSample,
    EstimatorFamily,
    Mean,
    SpatialMedian,
    WeightScheme,
)


@dataclass(frozen=True)
class SolveOptions:
    tol: float = 1e-10
    step_tol: float = 1e-12
    max_iter: int = 500
    max_cond: float = 1e12


@dataclass(frozen=True)
class SolveResult:
    theta_hat: np.ndarray
    iterations: int
    converged: bool
    final_gradient_norm: float
    objective_value: float
    method: str = ""


def weighted_median(values, weights) -> float:
    """Lower weighted median of a 1-d array."""
    order = np.argsort(values, kind="stable")
    v = np.asarray(values)[order]
    cw = np.cumsum(np.asarray(weights)[order])
    idx = int(np.searchsorted(cw, 0.5 * cw[-1]))
    return float(v[min(idx, v.size - 1)])


def coordinatewise_median(X, w) -> np.ndarray:
    return np.array([weighted_median(X[:, k], w) for k in range(X.shape[1])])


class _Problem:
    """Observation-level view shared by the iterative solvers."""

    def __init__(self, sample, w, fam):
        self.X = sample.points
        self.w = w.expand(sample)
        self.N = sample.N
        self.fam = fam
        # tie tolerance scaled to the data magnitude
        self.tie = TIE_TOL * max(1.0, float(np.abs(self.X).max()))

    def f(self, a):
        return float(self.w @ self.fam.rho(self.X, a) / self.N)

    def grad(self, a):
        return self.w @ self.fam.psi(self.X, a) / self.N

    def hess(self, a):
        jac, _ = self.fam.jacobian(self.X, a)
        return np.einsum("i,ijk->jk", self.w, jac) / self.N


def _stationarity(prob: _Problem, a) -> float:
    """Norm of the minimum-norm (sub)gradient of the objective at ``a``."""
    if isinstance(prob.fam, SpatialMedian):
        diff = a - prob.X
        r = np.linalg.norm(diff, axis=1)
        tie = r <= prob.tie
        free = ~tie
        g = prob.w[free] @ (diff[free] / r[free, None]) / prob.N
        tie_weight = prob.w[tie].sum() / prob.N
        return max(0.0, float(np.linalg.norm(g)) - tie_weight)
    return float(np.linalg.norm(prob.grad(a)))


def _solve_mean(sample, w):
    wij = w.expand(sample)
    theta = wij @ sample.points / wij.sum()
    return theta


def _weiszfeld_step(prob: _Problem, a):
    diff = prob.X - a
    r = np.linalg.norm(diff, axis=1)
    tie = r <= prob.tie
    free = ~tie
    if not free.any():
        return a
    coef = prob.w[free] / r[free]
    T = coef @ prob.X[free] / coef.sum()
    if not tie.any():
        return T
    # Vardi-Zhang: pull towards T only as far as the tie mass allows
    eta = prob.w[tie].sum()
    R = coef @ diff[free]
    nR = np.linalg.norm(R)
    if nR <= eta:
        return a
    beta = min(1.0, eta / nR)
    return (1.0 - beta) * T + beta * a


def _newton_step(prob: _Problem, a, g, max_cond):
    H = prob.hess(a)
    eig = np.linalg.eigvalsh(0.5 * (H + H.T))
    if eig[0] <= 0 or eig[-1] / eig[0] > max_cond:
        return None
    return -np.linalg.solve(H, g)


def _backtrack(prob, a, step, fa, max_halvings=30):
    t = 1.0
    for _ in range(max_halvings):
        cand = a + t * step
        fc = prob.f(cand)
        if fc <= fa + 1e-15 * max(1.0, abs(fa)):
            return cand, fc
        t *= 0.5
    return None, fa


def _iterate(prob: _Problem, a0, opts: SolveOptions, weiszfeld: bool):
    a = np.array(a0, dtype=float)
    fa = prob.f(a)
    gnorm = _stationarity(prob, a)
    it = 0
    method = "weiszfeld+newton" if weiszfeld else "newton"
    while it < opts.max_iter and gnorm > opts.tol:
        it += 1
        g = prob.grad(a)
        new = None
        at_point = weiszfeld and np.any(np.linalg.norm(prob.X - a, axis=1) <= prob.tie)
        if not at_point:
            step = _newton_step(prob, a, g, opts.max_cond)
            if step is not None:
                new, fnew = _backtrack(prob, a, step, fa)
                if new is not None and _stationarity(prob, new) > gnorm and fnew >= fa:
                    new = None
        if new is None:
            if weiszfeld:
                new = _weiszfeld_step(prob, a)
                fnew = prob.f(new)
                if fnew > fa:
                    # step-halving safeguard
                    new, fnew = _backtrack(prob, a, new - a, fa)
                    if new is None:
                        break
            else:
                new, fnew = _gradient_step(prob, a, g, fa)
                if new is None:
                    break
        step_len = float(np.linalg.norm(new - a))
        a, fa = new, fnew
        gnorm = _stationarity(prob, a)
        if weiszfeld and gnorm > opts.tol:
            snapped = _snap_to_vertex(prob, a, opts.tol)
            if snapped is not None:
                a, fa, gnorm = snapped
                break
        if step_len <= opts.step_tol * max(1.0, float(np.linalg.norm(a))):
            break
    return a, fa, gnorm, it, method


def _snap_to_vertex(prob: _Problem, a, tol):
    """Accept the nearest data point if it is close and satisfies the vertex condition.

    Weiszfeld converges to a data-point optimum only sublinearly and can stall a
    few ulps away from it, outside the tie tolerance.
    """
    r = np.linalg.norm(prob.X - a, axis=1)
    k = int(np.argmin(r))
    if r[k] > 1e-6 * max(1.0, float(np.abs(prob.X).max())):
        return None
    cand = prob.X[k].copy()
    g = _stationarity(prob, cand)
    if g > tol:
        return None
    return cand, prob.f(cand), g


def _gradient_step(prob, a, g, fa):
    # curvature-free step: start from a unit-length move and backtrack
    gn = np.linalg.norm(g)
    if gn == 0:
        return a, fa
    return _backtrack(prob, a, -g / gn * max(gn, 1e-3), fa, max_halvings=60)


def solve(
    sample: ClusteredSample,
    w: WeightScheme | None,
    fam: EstimatorFamily,
    opts: SolveOptions | None = None,
    start=None,
) -> SolveResult:
    """Compute the weighted M-estimate of location.

    Non-convergence is reported through ``converged=False``; it never raises.
    """
    opts = opts or SolveOptions()
    if w is None:
        w = WeightScheme.uniform(sample)
    prob = _Problem(sample, w, fam)

    if np.all(sample.points == sample.points[0]):
        a = sample.points[0].copy()
        return SolveResult(a, 0, True, _stationarity(prob, a), prob.f(a), "degenerate")

    if isinstance(fam, Mean):
        a = _solve_mean(sample, w)
        g = float(np.linalg.norm(prob.grad(a)))
        return SolveResult(a, 0, g <= opts.tol, g, prob.f(a), "closed-form")

    if start is not None:
        a0 = np.asarray(start, dtype=float)
    elif fam.robust:
        a0 = coordinatewise_median(prob.X, prob.w)
    else:
        a0 = _solve_mean(sample, w)

    a, fa, gnorm, it, method = _iterate(
        prob, a0, opts, weiszfeld=isinstance(fam, SpatialMedian)
    )
    return SolveResult(a, it, gnorm <= opts.tol, gnorm, fa, method)
