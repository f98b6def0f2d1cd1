"""Plug-in sandwich covariance for weighted M-estimators on clustered data.

``Sigma = V^-1 (B + C) V^-1`` where, for per-cluster weights ``w_i``:

* ``B = (1/N) sum_i w_i^2 sum_j psi_ij psi_ij^T``
* ``C = (1/N) sum_i w_i^2 sum_j sum_{j' != j} psi_ij' psi_ij^T``
* ``V = (1/N) sum_i w_i sum_j dpsi_ij/da``

``ClusterStatistics`` keeps the per-cluster sums behind those three matrices
so that they can be re-weighted cheaply (weight optimisation) and averaged
over Monte Carlo replications.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import ClusteredSample, DimensionError, EstimatorFamily, WeightScheme

MAX_COND = 1e12


class SingularCovarianceError(ArithmeticError):
    """Raised when the bread matrix cannot be inverted safely."""

    def __init__(self, family, point, condition):
        self.family = family
        self.point = np.asarray(point)
        self.condition = condition
        super().__init__(
            f"singular V_hat for estimator {family!r} at a={np.round(self.point, 12).tolist()} "
            f"(condition number {condition:.3g})"
        )


def _check_point(sample, a):
    a = np.asarray(a, dtype=float).ravel()
    if a.size != sample.d:
        raise DimensionError(f"evaluation point has dimension {a.size}, sample has {sample.d}")
    return a


def _cluster_weights(sample, w):
    if w is None:
        return np.ones(sample.n)
    return w.cluster_values(sample)


def b_hat(sample: ClusteredSample, w: WeightScheme | None, fam: EstimatorFamily, a) -> np.ndarray:
    a = _check_point(sample, a)
    wi = _cluster_weights(sample, w)
    psi = fam.psi(sample.points, a)
    w2 = wi[sample.labels] ** 2
    return np.einsum("i,ij,ik->jk", w2, psi, psi) / sample.N


def c_hat(sample: ClusteredSample, w: WeightScheme | None, fam: EstimatorFamily, a) -> np.ndarray:
    """Cross-pair term, summed pair by pair and symmetrised."""
    a = _check_point(sample, a)
    wi = _cluster_weights(sample, w)
    d = sample.d
    out = np.zeros((d, d))
    for i, cluster in enumerate(sample.clusters):
        m = cluster.shape[0]
        if m < 2:
            continue
        psi = fam.psi(cluster, a)
        jj, kk = np.nonzero(~np.eye(m, dtype=bool))
        out += wi[i] ** 2 * np.einsum("pj,pk->jk", psi[kk], psi[jj])
    out /= sample.N
    return 0.5 * (out + out.T)


def v_hat(sample: ClusteredSample, w: WeightScheme | None, fam: EstimatorFamily, a) -> np.ndarray:
    return _v_hat_flagged(sample, w, fam, a)[0]


def _v_hat_flagged(sample, w, fam, a):
    a = _check_point(sample, a)
    wi = _cluster_weights(sample, w)
    jac, kink = fam.jacobian(sample.points, a)
    V = np.einsum("i,ijk->jk", wi[sample.labels], jac) / sample.N
    return V, int(kink.sum())


def symmetric_inverse(M):
    """Inverse of a symmetric matrix via eigh; returns ``(inverse, condition)``."""
    S = 0.5 * (M + M.T)
    vals, vecs = np.linalg.eigh(S)
    mags = np.abs(vals)
    if mags.min() == 0:
        return None, np.inf
    cond = float(mags.max() / mags.min())
    return (vecs / vals) @ vecs.T, cond


@dataclass(frozen=True)
class CovarianceReport:
    B_hat: np.ndarray
    C_hat: np.ndarray
    V_hat: np.ndarray
    Sigma_hat: np.ndarray
    eval_point: np.ndarray
    condition_V: float
    family: str = ""
    nonsmooth_hits: int = 0

    @property
    def d(self) -> int:
        return self.Sigma_hat.shape[0]

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "eval_point": self.eval_point.tolist(),
            "condition_V": self.condition_V,
            "nonsmooth_hits": self.nonsmooth_hits,
            "B_hat": self.B_hat.tolist(),
            "C_hat": self.C_hat.tolist(),
            "V_hat": self.V_hat.tolist(),
            "Sigma_hat": self.Sigma_hat.tolist(),
        }


def assemble(B, C, V, *, family="", point=None, nonsmooth_hits=0) -> CovarianceReport:
    Vinv, cond = symmetric_inverse(V)
    if Vinv is None or not np.isfinite(cond) or cond >= MAX_COND:
        raise SingularCovarianceError(family, point if point is not None else [], cond)
    S = Vinv @ (B + C) @ Vinv
    S = 0.5 * (S + S.T)
    return CovarianceReport(
        B, C, V, S, np.asarray(point, dtype=float), cond, family, nonsmooth_hits
    )


def sigma_hat(sample: ClusteredSample, w: WeightScheme | None, fam: EstimatorFamily, a) -> CovarianceReport:
    """Plug-in sandwich at the evaluation point ``a`` (true theta or an estimate)."""
    a = _check_point(sample, a)
    B = b_hat(sample, w, fam, a)
    C = c_hat(sample, w, fam, a)
    V, hits = _v_hat_flagged(sample, w, fam, a)
    return assemble(B, C, V, family=fam.label, point=a, nonsmooth_hits=hits)


def relative_efficiency(report_unweighted: CovarianceReport, report_weighted: CovarianceReport) -> float:
    """``(det Sigma_unweighted / det Sigma_weighted)^(1/d)``; > 1 favours the weights."""
    return det_ratio(report_unweighted.Sigma_hat, report_weighted.Sigma_hat)


def det_ratio(num, den) -> float:
    num = np.asarray(num)
    den = np.asarray(den)
    if num.shape != den.shape:
        raise DimensionError("covariance matrices differ in dimension")
    d = num.shape[0]
    dn = np.linalg.det(num)
    dd = np.linalg.det(den)
    if not (dn > 0 and dd > 0):
        raise ArithmeticError(
            f"non-positive covariance determinant ({dn:.3g}, {dd:.3g})"
        )
    return float((dn / dd) ** (1.0 / d))


# ---------------------------------------------------------------------------
# re-weightable per-cluster sums
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClusterStatistics:
    """Per-cluster sums of ``psi psi^T`` (own), cross pairs, and Jacobians.

    Arrays have shape ``(n, d, d)``.  ``sigma(w)`` is invariant to a common
    rescaling of ``w``.
    """

    sizes: np.ndarray
    own: np.ndarray
    cross: np.ndarray
    jac: np.ndarray
    family: str = ""
    point: np.ndarray = field(default=None)

    @property
    def N(self) -> int:
        return int(self.sizes.sum())

    @property
    def n(self) -> int:
        return self.sizes.size

    @property
    def d(self) -> int:
        return self.own.shape[1]

    @classmethod
    def from_sample(cls, sample: ClusteredSample, fam: EstimatorFamily, a) -> "ClusterStatistics":
        a = _check_point(sample, a)
        psi = fam.psi(sample.points, a)
        jac, _ = fam.jacobian(sample.points, a)
        n, d = sample.n, sample.d
        own = np.zeros((n, d, d))
        np.add.at(own, sample.labels, psi[:, :, None] * psi[:, None, :])
        tot = np.zeros((n, d))
        np.add.at(tot, sample.labels, psi)
        cross = tot[:, :, None] * tot[:, None, :] - own
        J = np.zeros((n, d, d))
        np.add.at(J, sample.labels, jac)
        return cls(np.array(sample.sizes), own, cross, J, fam.label, a)

    @classmethod
    def pooled(cls, stats: Sequence["ClusterStatistics"]) -> "ClusterStatistics":
        """Average of statistics over replications sharing one configuration."""
        first = stats[0]
        for s in stats[1:]:
            if not np.array_equal(s.sizes, first.sizes):
                raise ValueError("pooled statistics need identical cluster sizes")
        return cls(
            first.sizes,
            np.mean([s.own for s in stats], axis=0),
            np.mean([s.cross for s in stats], axis=0),
            np.mean([s.jac for s in stats], axis=0),
            first.family,
            first.point,
        )

    @classmethod
    def equicorrelated(cls, sizes, tau: float, B=None, V=None) -> "ClusterStatistics":
        """Population values for ``C_i = tau * B`` in every cluster."""
        sizes = np.asarray(sizes, dtype=int)
        B = np.eye(1) if B is None else np.asarray(B, dtype=float)
        V = np.eye(B.shape[0]) if V is None else np.asarray(V, dtype=float)
        m = sizes[:, None, None].astype(float)
        return cls(sizes, m * B, m * (m - 1) * tau * B, m * V, "analytic", None)

    def matrices(self, w=None):
        w = np.ones(self.n) if w is None else np.asarray(w, dtype=float)
        w2 = w**2
        N = self.N
        B = np.einsum("i,ijk->jk", w2, self.own) / N
        C = np.einsum("i,ijk->jk", w2, self.cross) / N
        C = 0.5 * (C + C.T)
        V = np.einsum("i,ijk->jk", w, self.jac) / N
        return B, C, V

    def report(self, w=None) -> CovarianceReport:
        B, C, V = self.matrices(w)
        return assemble(B, C, V, family=self.family, point=self.point)

    def log_det_sigma(self, w) -> float:
        """``log det Sigma(w)`` = ``logdet(B + C) - 2 logdet(V)``; +inf if degenerate."""
        B, C, V = self.matrices(w)
        s1, l1 = np.linalg.slogdet(B + C)
        s2, l2 = np.linalg.slogdet(V)
        if s1 <= 0 or s2 == 0:
            return np.inf
        return float(l1 - 2.0 * l2)


# ---------------------------------------------------------------------------
# finite-sample assumption diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AssumptionDiagnostics:
    weight_mean: float
    c_w_finite: float
    kolmogorov_partial: float
    lindeberg_sum: float
    eta: float = 1.0


def assumption_diagnostics(w: WeightScheme, sample: ClusteredSample, eta: float = 1.0) -> AssumptionDiagnostics:
    if not eta > 0:
        raise ValueError("eta must be positive")
    wij = w.expand(sample)
    N = sample.N
    row_sums = np.bincount(sample.labels, weights=wij, minlength=sample.n)
    idx = np.arange(1, sample.n + 1, dtype=float)
    return AssumptionDiagnostics(
        weight_mean=float(wij.sum() / N),
        c_w_finite=float((wij**2).sum() / N),
        kolmogorov_partial=float(np.sum(row_sums**2 / idx**2)),
        lindeberg_sum=float(np.sum(row_sums ** (2.0 + eta)) / N),
        eta=eta,
    )
