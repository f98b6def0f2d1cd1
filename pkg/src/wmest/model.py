"""Clustered data, weight schemes and the rho/psi/psi-dot estimator families.

Every family is written in location form: the loss depends on ``x - a`` only,
with ``diff = a - x`` and ``r = ||a - x||``.  ``psi`` is the gradient of
``rho`` with respect to the location ``a`` and ``jacobian`` is the derivative
of ``psi`` with respect to ``a``.

Vectorised methods take ``X`` with shape ``(n, d)`` and return one value per
row; the scalar helpers ``rho_eval``/``psi_eval``/``psi_jacobian`` wrap them
for single points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# |x - a| below this is treated as a tie for the spatial median
TIE_TOL = 1e-12


class DimensionError(ValueError):
    pass


class WeightError(ValueError):
    pass


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------


class ClusteredSample:
    """``n`` clusters of ``m_i`` points in R^d.

    Clusters are stored as a list of read-only ``(m_i, d)`` arrays.  The
    concatenated view ``points`` and the matching ``labels`` (cluster index
    per row) are built once at construction.
    """

    def __init__(self, clusters: Sequence, ids: Sequence[int] | None = None):
        if len(clusters) < 1:
            raise ValueError("a sample needs at least one cluster")
        arrs = []
        for c in clusters:
            a = np.array(c, dtype=float)
            if a.ndim == 1:
                a = a[:, None] if a.size else a.reshape(0, 1)
            if a.ndim != 2 or a.shape[0] < 1:
                raise ValueError("every cluster needs at least one point")
            arrs.append(a)
        d = arrs[0].shape[1]
        if d < 1 or any(a.shape[1] != d for a in arrs):
            raise DimensionError("all points must share the same dimension")
        for a in arrs:
            a.setflags(write=False)
        self.clusters = tuple(arrs)
        self.sizes = np.array([a.shape[0] for a in arrs], dtype=int)
        self.sizes.setflags(write=False)
        self.points = np.concatenate(arrs, axis=0)
        self.points.setflags(write=False)
        self.labels = np.repeat(np.arange(len(arrs)), self.sizes)
        self.labels.setflags(write=False)
        if ids is None:
            ids = list(range(1, len(arrs) + 1))
        if len(ids) != len(arrs):
            raise ValueError("one id per cluster required")
        self.ids = tuple(int(i) for i in ids)

    @property
    def n(self) -> int:
        return len(self.clusters)

    @property
    def N(self) -> int:
        return int(self.sizes.sum())

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def shifted(self, c) -> "ClusteredSample":
        c = np.asarray(c, dtype=float)
        return ClusteredSample([a + c for a in self.clusters], self.ids)

    def __repr__(self):
        return f"ClusteredSample(n={self.n}, N={self.N}, d={self.d})"


@dataclass(frozen=True)
class WeightScheme:
    """Positive weights, either one per cluster or one per observation."""

    values: np.ndarray
    per_cluster: bool = True

    def __post_init__(self):
        v = np.array(self.values, dtype=float).ravel()
        if v.size == 0 or not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise WeightError("weights must be finite and strictly positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def uniform(cls, sample: ClusteredSample) -> "WeightScheme":
        return cls(np.ones(sample.n), per_cluster=True)

    @classmethod
    def per_observation(cls, values) -> "WeightScheme":
        return cls(values, per_cluster=False)

    def expand(self, sample: ClusteredSample) -> np.ndarray:
        """Observation-level weights ``w_ij`` aligned with ``sample.points``."""
        if self.per_cluster:
            if self.values.size != sample.n:
                raise WeightError(
                    f"expected {sample.n} cluster weights, got {self.values.size}"
                )
            return np.repeat(self.values, sample.sizes)
        if self.values.size != sample.N:
            raise WeightError(
                f"expected {sample.N} observation weights, got {self.values.size}"
            )
        return self.values

    def normalized(self, sample: ClusteredSample) -> "WeightScheme":
        """Rescale so that ``(1/N) sum_ij w_ij = 1``."""
        total = self.expand(sample).sum()
        return WeightScheme(self.values * (sample.N / total), self.per_cluster)

    def cluster_values(self, sample: ClusteredSample) -> np.ndarray:
        if not self.per_cluster:
            raise WeightError("operation requires per-cluster weights")
        if self.values.size != sample.n:
            raise WeightError(
                f"expected {sample.n} cluster weights, got {self.values.size}"
            )
        return self.values


# ---------------------------------------------------------------------------
# estimator families
# ---------------------------------------------------------------------------


def _diffs(X, a):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    a = np.asarray(a, dtype=float).ravel()
    if X.shape[1] != a.size:
        raise DimensionError(f"point dimension {X.shape[1]} != location dimension {a.size}")
    diff = a[None, :] - X
    r = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return diff, r


class EstimatorFamily:
    """Base class; subclasses implement the vectorised triple."""

    name = "base"

    #: robust families start the solver from a coordinatewise median
    robust = False

    def rho(self, X, a) -> np.ndarray:
        raise NotImplementedError

    def psi(self, X, a) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, X, a) -> np.ndarray:
        """Return ``(jac, on_kink)``; ``on_kink`` flags rows on a nonsmooth locus."""
        raise NotImplementedError

    def __repr__(self):
        return self.label

    @property
    def label(self) -> str:
        return self.name

    def __eq__(self, other):
        return type(self) is type(other) and self.__dict__ == other.__dict__

    def __hash__(self):
        return hash((type(self).__name__, tuple(sorted(self.__dict__.items()))))


class Mean(EstimatorFamily):
    name = "mean"

    def rho(self, X, a):
        _, r = _diffs(X, a)
        return 0.5 * r**2

    def psi(self, X, a):
        diff, _ = _diffs(X, a)
        return diff

    def jacobian(self, X, a):
        diff, _ = _diffs(X, a)
        n, d = diff.shape
        return np.broadcast_to(np.eye(d), (n, d, d)).copy(), np.zeros(n, bool)


def _unit(diff, r):
    safe = np.where(r > TIE_TOL, r, 1.0)
    u = diff / safe[:, None]
    u[r <= TIE_TOL] = 0.0
    return u, safe


def _projector(u, r):
    # (I - u u^T) / r, one matrix per row
    d = u.shape[1]
    return (np.eye(d)[None] - u[:, :, None] * u[:, None, :]) / r[:, None, None]


class SpatialMedian(EstimatorFamily):
    name = "spatial-median"
    robust = True

    def rho(self, X, a):
        _, r = _diffs(X, a)
        return r

    def psi(self, X, a):
        diff, r = _diffs(X, a)
        u, _ = _unit(diff, r)
        return u

    def jacobian(self, X, a):
        diff, r = _diffs(X, a)
        u, safe = _unit(diff, r)
        jac = _projector(u, safe)
        tie = r <= TIE_TOL
        # undefined at a data point; zero contribution and flag
        jac[tie] = 0.0
        return jac, tie


@dataclass(eq=False)
class Huber(EstimatorFamily):
    k: float = 1.345
    name = "huber"
    robust = True

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("Huber tuning constant must be positive")

    @property
    def label(self):
        return f"huber(k={self.k:g})"

    def rho(self, X, a):
        _, r = _diffs(X, a)
        k = self.k
        return np.where(r <= k, 0.5 * r**2, k * r - 0.5 * k * k)

    def psi(self, X, a):
        diff, r = _diffs(X, a)
        scale = np.where(r <= self.k, 1.0, self.k / np.maximum(r, self.k))
        return diff * scale[:, None]

    def jacobian(self, X, a):
        diff, r = _diffs(X, a)
        n, d = diff.shape
        outer = r > self.k
        jac = np.broadcast_to(np.eye(d), (n, d, d)).copy()
        if outer.any():
            u, safe = _unit(diff[outer], r[outer])
            jac[outer] = self.k * _projector(u, safe)
        on_kink = np.isclose(r, self.k, rtol=0.0, atol=1e-12)
        return jac, on_kink


@dataclass(eq=False)
class LpMedian(EstimatorFamily):
    p: float = 3.0
    name = "lp-median"

    def __post_init__(self):
        if not self.p > 2:
            raise ValueError("Lp-median requires p > 2")

    @property
    def label(self):
        return f"lp-median(p={self.p:g})"

    def rho(self, X, a):
        _, r = _diffs(X, a)
        return r**self.p

    def psi(self, X, a):
        diff, r = _diffs(X, a)
        return self.p * (r ** (self.p - 2))[:, None] * diff

    def jacobian(self, X, a):
        diff, r = _diffs(X, a)
        p = self.p
        n, d = diff.shape
        lead = p * r ** (p - 2)
        # r^(p-4) * diff diff^T stays bounded since |diff|^2 = r^2
        safe = np.where(r > 0, r, 1.0)
        second = np.where(r > 0, p * (p - 2) * safe ** (p - 4), 0.0)
        jac = lead[:, None, None] * np.eye(d)[None] + second[:, None, None] * (
            diff[:, :, None] * diff[:, None, :]
        )
        return jac, np.zeros(n, bool)


def make_family(kind: str, huber_k: float = 1.345, lp_p: float = 3.0) -> EstimatorFamily:
    """Build a family from a CLI/config name."""
    key = kind.strip().lower().replace("_", "-")
    if key == "mean":
        return Mean()
    if key in ("spatial-median", "median"):
        return SpatialMedian()
    if key == "huber":
        return Huber(huber_k)
    if key in ("lp-median", "lp"):
        return LpMedian(lp_p)
    raise ValueError(f"unknown estimator family {kind!r}")


def family_to_dict(fam: EstimatorFamily) -> dict:
    out = {"kind": fam.name}
    if isinstance(fam, Huber):
        out["k"] = fam.k
    elif isinstance(fam, LpMedian):
        out["p"] = fam.p
    return out


def family_from_dict(spec: dict) -> EstimatorFamily:
    return make_family(spec["kind"], spec.get("k", 1.345), spec.get("p", 3.0))


# ---------------------------------------------------------------------------
# single-point operations
# ---------------------------------------------------------------------------


def _point_pair(x, a):
    x = np.asarray(x, dtype=float).ravel()
    a = np.asarray(a, dtype=float).ravel()
    if x.shape != a.shape:
        raise DimensionError(f"dimension mismatch: {x.size} vs {a.size}")
    return x, a


def rho_eval(fam: EstimatorFamily, x, a) -> float:
    x, a = _point_pair(x, a)
    return float(fam.rho(x[None], a)[0])


def psi_eval(fam: EstimatorFamily, x, a) -> np.ndarray:
    x, a = _point_pair(x, a)
    return fam.psi(x[None], a)[0]


@dataclass(frozen=True)
class JacobianResult:
    matrix: np.ndarray
    on_nonsmooth_locus: bool = False


def psi_jacobian(fam: EstimatorFamily, x, a) -> JacobianResult:
    x, a = _point_pair(x, a)
    jac, flag = fam.jacobian(x[None], a)
    return JacobianResult(jac[0], bool(flag[0]))


def objective(sample: ClusteredSample, w: WeightScheme, fam: EstimatorFamily, a) -> float:
    """``(1/N) sum_ij w_ij rho(X_ij, a)``."""
    a = np.asarray(a, dtype=float).ravel()
    if a.size != sample.d:
        raise DimensionError(f"location has dimension {a.size}, sample has {sample.d}")
    wij = w.expand(sample)
    return float(wij @ fam.rho(sample.points, a) / sample.N)


def estimating_function(sample: ClusteredSample, w: WeightScheme, fam: EstimatorFamily, a) -> np.ndarray:
    """``(1/N) sum_ij w_ij psi(X_ij, a)``."""
    wij = w.expand(sample)
    return wij @ fam.psi(sample.points, a) / sample.N
