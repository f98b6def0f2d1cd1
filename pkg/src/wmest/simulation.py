"""Clustered sample generation and seed-controlled Monte Carlo experiments.

Within a cluster every coordinate follows ``sqrt(rho) Z_i + sqrt(1 - rho) e_ij``
so any two observations of the cluster have correlation ``rho`` and unit
variance.  Student draws divide a whole cluster by one shared
``sqrt(chi2_nu / nu)`` factor, which keeps the cluster exchangeable.

Replication ``r`` of a run seeded with ``s`` always draws from
``SeedSequence(s, spawn_key=(r,))``, so serial and parallel runs agree bit for
bit.  Per-replication statistics are collected in replication order before
any averaging.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .asymptotics import ClusterStatistics, SingularCovarianceError, det_ratio
from .model import (
    ClusteredSample,
    EstimatorFamily,
    Mean,
    SpatialMedian,
    WeightScheme,
    family_from_dict,
    family_to_dict,
)
from .solver import SolveOptions, solve
from .weights import WeightOptions, normalize, optimize_weights_stats

log = logging.getLogger(__name__)

NAMED_CONFIGURATIONS = {
    "C1": [4] * 9 + [64],
    "C2": [4] * 5 + [16] * 5,
    "C3": [4, 4, 8] + [12] * 7,
    "C4": [5, 6, 7, 8, 9, 11, 12, 13, 14, 15],
}


@dataclass(frozen=True)
class ClusterConfiguration:
    name: str
    sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(m) for m in self.sizes)
        if not sizes or any(m < 1 for m in sizes):
            raise ValueError("cluster sizes must be positive")
        object.__setattr__(self, "sizes", sizes)

    @classmethod
    def named(cls, name: str) -> "ClusterConfiguration":
        key = name.upper()
        if key not in NAMED_CONFIGURATIONS:
            raise ValueError(f"unknown configuration {name!r}")
        return cls(key, tuple(NAMED_CONFIGURATIONS[key]))

    @classmethod
    def custom(cls, sizes) -> "ClusterConfiguration":
        return cls("custom", tuple(sizes))

    @property
    def N(self) -> int:
        return sum(self.sizes)

    @property
    def n(self) -> int:
        return len(self.sizes)


@dataclass(frozen=True)
class DistributionSpec:
    family: str = "gaussian"
    rho: float = 0.2
    d: int = 2
    nu: float | None = None
    theta: tuple | None = None

    def __post_init__(self):
        fam = self.family.lower()
        if fam == "cauchy":
            object.__setattr__(self, "nu", 1.0)
        elif fam == "student":
            if self.nu is None or self.nu < 1:
                raise ValueError("Student distribution needs nu >= 1")
        elif fam == "gaussian":
            object.__setattr__(self, "nu", None)
        else:
            raise ValueError(f"unknown distribution family {self.family!r}")
        object.__setattr__(self, "family", fam)
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if self.d < 1:
            raise ValueError("dimension must be >= 1")
        theta = (0.0,) * self.d if self.theta is None else tuple(float(t) for t in self.theta)
        if len(theta) != self.d:
            raise ValueError("theta dimension mismatch")
        object.__setattr__(self, "theta", theta)

    @property
    def label(self) -> str:
        if self.family == "student":
            return f"student{self.nu:g}"
        return self.family

    @property
    def heavy_tailed(self) -> bool:
        return self.family != "gaussian"


def replication_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=(int(index),))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.default_rng(seed)


def generate_sample(cfg: ClusterConfiguration, dist: DistributionSpec, seed) -> ClusteredSample:
    rng = _rng(seed)
    sizes = np.asarray(cfg.sizes)
    n, d = sizes.size, dist.d
    shared = rng.standard_normal((n, d))
    noise = rng.standard_normal((int(sizes.sum()), d))
    labels = np.repeat(np.arange(n), sizes)
    X = np.sqrt(dist.rho) * shared[labels] + np.sqrt(1.0 - dist.rho) * noise
    if dist.nu is not None:
        scale = np.sqrt(rng.chisquare(dist.nu, size=n) / dist.nu)
        X = X / scale[labels][:, None]
    X += np.asarray(dist.theta)
    bounds = np.cumsum(sizes)[:-1]
    return ClusteredSample(np.split(X, bounds))


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    configuration: ClusterConfiguration
    distribution: DistributionSpec
    estimators: list
    weights_source: str = "optimal"
    replications: int = 500
    seed: int = 20150101
    eval_point: str = "true_theta"
    weights: list | None = None
    reference: str | None = None
    record_estimates: bool = True

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.weights_source not in ("unweighted", "optimal", "file"):
            raise ValueError(f"unknown weights_source {self.weights_source!r}")
        if self.eval_point not in ("true_theta", "estimated"):
            raise ValueError(f"unknown eval_point {self.eval_point!r}")
        if self.weights_source == "file":
            if self.weights is None or len(self.weights) != self.configuration.n:
                raise ValueError("weights_source 'file' needs one weight per cluster")
        if not self.estimators:
            raise ValueError("at least one estimator required")

    @property
    def reference_family(self) -> EstimatorFamily:
        if self.reference is not None:
            return family_from_dict({"kind": self.reference})
        return SpatialMedian() if self.distribution.heavy_tailed else Mean()

    def to_dict(self) -> dict:
        return {
            "configuration": {"name": self.configuration.name, "sizes": list(self.configuration.sizes)},
            "distribution": asdict(self.distribution),
            "estimators": [family_to_dict(f) for f in self.estimators],
            "weights_source": self.weights_source,
            "replications": self.replications,
            "seed": self.seed,
            "eval_point": self.eval_point,
            "weights": None if self.weights is None else list(self.weights),
            "reference": self.reference,
            "record_estimates": self.record_estimates,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        conf = raw["configuration"]
        if isinstance(conf, str):
            configuration = ClusterConfiguration.named(conf)
        elif conf.get("name", "custom").upper() in NAMED_CONFIGURATIONS and "sizes" not in conf:
            configuration = ClusterConfiguration.named(conf["name"])
        else:
            configuration = ClusterConfiguration(conf.get("name", "custom"), tuple(conf["sizes"]))
        dist = raw["distribution"]
        theta = dist.get("theta")
        distribution = DistributionSpec(
            family=dist.get("family", "gaussian"),
            rho=float(dist["rho"]),
            d=int(dist.get("d", 2)),
            nu=dist.get("nu"),
            theta=tuple(theta) if theta is not None else None,
        )
        estimators = [
            family_from_dict(e if isinstance(e, dict) else {"kind": e}) for e in raw["estimators"]
        ]
        return cls(
            configuration=configuration,
            distribution=distribution,
            estimators=estimators,
            weights_source=raw.get("weights_source", "optimal"),
            replications=int(raw.get("replications", 500)),
            seed=int(raw.get("seed", 20150101)),
            eval_point=raw.get("eval_point", "true_theta"),
            weights=raw.get("weights"),
            reference=raw.get("reference"),
            record_estimates=bool(raw.get("record_estimates", True)),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# replication tasks (module-level so they pickle into worker processes)
# ---------------------------------------------------------------------------


def _first_pass(args):
    cfg, index = args
    sample = generate_sample(cfg.configuration, cfg.distribution, replication_seed(cfg.seed, index))
    theta = np.asarray(cfg.distribution.theta)
    out = []
    for fam in cfg.estimators:
        est, ok = None, True
        if cfg.record_estimates or cfg.eval_point == "estimated":
            res = solve(sample, None, fam)
            est, ok = res.theta_hat, res.converged
        point = theta if cfg.eval_point == "true_theta" else est
        out.append((ClusterStatistics.from_sample(sample, fam, point), est, ok))
    return out


def _second_pass(args):
    cfg, index, weight_sets = args
    sample = generate_sample(cfg.configuration, cfg.distribution, replication_seed(cfg.seed, index))
    out = []
    for fam, w in zip(cfg.estimators, weight_sets):
        res = solve(sample, WeightScheme(w), fam)
        stats = None
        if cfg.eval_point == "estimated":
            stats = ClusterStatistics.from_sample(sample, fam, res.theta_hat)
        out.append((stats, res.theta_hat, res.converged))
    return out


def _map(fn, tasks, workers):
    if workers is None or workers <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        # map preserves task order, so aggregation is schedule-independent
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class EstimatorSummary:
    estimator: str
    family: EstimatorFamily
    weights: np.ndarray
    sigma: np.ndarray
    sigma_w: np.ndarray
    efficiency: float
    efficiency_stderr: float
    ratio_weighted: float | None = None
    ratio_unweighted: float | None = None
    theta_hat: np.ndarray | None = None
    theta_hat_w: np.ndarray | None = None
    converged: np.ndarray | None = None
    converged_w: np.ndarray | None = None
    optimizer_converged: bool | None = None
    failed_replications: int = 0

    def empirical_covariance(self, theta, N, weighted=True) -> np.ndarray:
        """Covariance of ``sqrt(N) (theta_hat - theta)`` over converged replications."""
        est = self.theta_hat_w if weighted else self.theta_hat
        ok = self.converged_w if weighted else self.converged
        z = np.sqrt(N) * (est[ok] - np.asarray(theta))
        return z.T @ z / z.shape[0]


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    summaries: list = field(default_factory=list)

    def summary(self, label: str) -> EstimatorSummary:
        for s in self.summaries:
            if s.estimator == label or s.family.name == label:
                return s
        raise KeyError(label)

    def rows(self) -> list:
        cfg = self.config
        base = [cfg.configuration.name, cfg.distribution.label, cfg.distribution.rho]
        out = []
        for s in self.summaries:
            out.append(base + [s.estimator, "efficiency", s.efficiency, s.efficiency_stderr])
            if s.ratio_weighted is not None:
                out.append(base + [s.estimator, "ratio_weighted", s.ratio_weighted, ""])
                out.append(base + [s.estimator, "ratio_unweighted", s.ratio_unweighted, ""])
            out.append(base + [s.estimator, "det_sigma", float(np.linalg.det(s.sigma)), ""])
            out.append(base + [s.estimator, "det_sigma_w", float(np.linalg.det(s.sigma_w)), ""])
            out.append(base + [s.estimator, "failed_replications", s.failed_replications, ""])
            for i, w in enumerate(s.weights, start=1):
                out.append(base + [s.estimator, f"weight_{i}", float(w), ""])
        return out


ROW_HEADER = ["config", "distribution", "rho", "estimator", "metric", "value", "stderr"]


def _jackknife_efficiency(stacked_u, stacked_w, w, d, sizes):
    """Leave-one-replication-out standard error of the efficiency index."""
    R = stacked_u[0].shape[0]
    if R < 2:
        return float("nan")
    vals = []
    for r in range(R):
        def loo(arrs):
            return [(a.sum(axis=0) - a[r]) / (R - 1) for a in arrs]

        ou, cu, ju = loo(stacked_u)
        ow, cw, jw = loo(stacked_w)
        su = _sigma_from(ou, cu, ju, np.ones(len(w)), sizes)
        sw = _sigma_from(ow, cw, jw, w, sizes)
        if su is None or sw is None:
            continue
        dn, dd = np.linalg.det(su), np.linalg.det(sw)
        if dn > 0 and dd > 0:
            vals.append((dn / dd) ** (1.0 / d))
    vals = np.asarray(vals)
    if vals.size < 2:
        return float("nan")
    k = vals.size
    return float(np.sqrt((k - 1) / k * np.sum((vals - vals.mean()) ** 2)))


def _sigma_from(own, cross, jac, w, sizes):
    st = ClusterStatistics(sizes, own, cross, jac)
    try:
        return st.report(w).Sigma_hat
    except SingularCovarianceError:
        return None


def _stack(stats):
    return (
        np.stack([s.own for s in stats]),
        np.stack([s.cross for s in stats]),
        np.stack([s.jac for s in stats]),
    )


def pooled_statistics(cfg: ExperimentConfig, workers: int = 1) -> list:
    """Per-estimator cluster statistics averaged over all replications.

    Evaluated at the true location, or at each replication's unweighted
    estimate when ``cfg.eval_point == "estimated"``.
    """
    first = _map(_first_pass, [(cfg, r) for r in range(cfg.replications)], workers)
    return [
        ClusterStatistics.pooled([first[r][k][0] for r in range(cfg.replications)])
        for k in range(len(cfg.estimators))
    ]


def run_experiment(cfg: ExperimentConfig, workers: int = 1, weight_options: WeightOptions | None = None) -> ExperimentReport:
    R = cfg.replications
    first = _map(_first_pass, [(cfg, r) for r in range(R)], workers)
    d = cfg.distribution.d
    sizes = np.asarray(cfg.configuration.sizes)
    theta = np.asarray(cfg.distribution.theta)

    weight_sets = []
    pooled_u = []
    stacked_u = []
    opt_flags = []
    for k, fam in enumerate(cfg.estimators):
        stats = [first[r][k][0] for r in range(R)]
        pooled = ClusterStatistics.pooled(stats)
        pooled_u.append(pooled)
        stacked_u.append(_stack(stats))
        if cfg.weights_source == "unweighted":
            w, flag = np.ones(sizes.size), None
        elif cfg.weights_source == "file":
            w, flag = normalize(cfg.weights, sizes), None
        else:
            res = optimize_weights_stats(pooled, weight_options)
            w, flag = res.weights, res.converged
            log.info("%s: optimal weights %s", fam.label, np.round(w, 4))
        weight_sets.append(w)
        opt_flags.append(flag)

    second = None
    if cfg.record_estimates or cfg.eval_point == "estimated":
        second = _map(_second_pass, [(cfg, r, weight_sets) for r in range(R)], workers)

    report = ExperimentReport(cfg)
    sigmas = {}
    for k, fam in enumerate(cfg.estimators):
        w = weight_sets[k]
        if cfg.eval_point == "estimated":
            wstats = [second[r][k][0] for r in range(R)]
            pooled_w = ClusterStatistics.pooled(wstats)
            stacked_w = _stack(wstats)
        else:
            pooled_w = pooled_u[k]
            stacked_w = stacked_u[k]
        sig = pooled_u[k].report(None).Sigma_hat
        sig_w = pooled_w.report(w).Sigma_hat
        eff = det_ratio(sig, sig_w)
        se = _jackknife_efficiency(stacked_u[k], stacked_w, w, d, sizes) if R > 1 else float("nan")
        s = EstimatorSummary(
            estimator=fam.label,
            family=fam,
            weights=w,
            sigma=sig,
            sigma_w=sig_w,
            efficiency=eff,
            efficiency_stderr=se,
            optimizer_converged=opt_flags[k],
        )
        if cfg.record_estimates:
            s.theta_hat = np.array([first[r][k][1] for r in range(R)])
            s.converged = np.array([first[r][k][2] for r in range(R)])
            s.theta_hat_w = np.array([second[r][k][1] for r in range(R)])
            s.converged_w = np.array([second[r][k][2] for r in range(R)])
            s.failed_replications = int(np.sum(~(s.converged & s.converged_w)))
        sigmas[fam] = (sig, sig_w)
        report.summaries.append(s)

    ref = cfg.reference_family
    if ref in sigmas:
        ref_u, ref_w = sigmas[ref]
        for s in report.summaries:
            s.ratio_weighted = det_ratio(s.sigma_w, ref_w)
            s.ratio_unweighted = det_ratio(s.sigma, ref_u)
    return report
