"""``wmest`` command-line front end.

Exit codes: 0 success, 1 input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .asymptotics import SingularCovarianceError, assumption_diagnostics, sigma_hat
from .breakdown import breakdown_bracket, breakdown_exact, expand_cluster_weights, spatial_median_eps
from .io import (
    InputFormatError,
    RunManifest,
    default_seed,
    read_sample_csv,
    read_weights_csv,
    write_covariance_csv,
    write_csv,
    write_theta_csv,
    write_weights_csv,
)
from .model import WeightScheme, family_to_dict, make_family
from .reference import ROW_HEADER, TABLES, key_for_family, reproduce
from .simulation import ROW_HEADER as REPORT_HEADER
from .simulation import ExperimentConfig, pooled_statistics, run_experiment
from .solver import SolveOptions, solve
from .weights import WeightOptions, normalize, optimize_weights_stats

log = logging.getLogger("wmest")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERIC = 2


class InputError(Exception):
    """Bad user input; maps to exit code 1."""


class NumericalFailure(Exception):
    """Solver or covariance failure; maps to exit code 2."""


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _parse_point(text, d):
    try:
        a = np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise InputError(f"--eval-point must be comma-separated numbers, got {text!r}") from None
    if a.size != d:
        raise InputError(f"--eval-point has {a.size} coordinates, data has d={d}")
    return a


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------


def cmd_estimate(args) -> int:
    out = _out_dir(args.out_dir)
    manifest = RunManifest(command="estimate", config_path=str(args.sample))
    sample = read_sample_csv(args.sample)
    fam = make_family(args.family, huber_k=args.huber_k, lp_p=args.lp_p)
    if args.weights:
        table = read_weights_csv(args.weights)
        try:
            w = table.scheme_for(sample)
        except ValueError as exc:
            raise InputError(f"{args.weights}: {exc}") from None
        manifest.notes["weights"] = str(args.weights)
    else:
        w = None
        manifest.notes["weights"] = "w ≡ 1"
    manifest.notes["family"] = family_to_dict(fam)

    res = solve(sample, w, fam, SolveOptions(tol=args.tol))
    theta_path = out / "theta.csv"
    write_theta_csv(theta_path, res.theta_hat)
    manifest.add_output(theta_path)
    result = {
        "family": fam.label,
        "n_clusters": sample.n,
        "N": sample.N,
        "d": sample.d,
        "solve": {
            "theta_hat": res.theta_hat.tolist(),
            "iterations": res.iterations,
            "converged": res.converged,
            "final_gradient_norm": res.final_gradient_norm,
            "objective_value": res.objective_value,
            "method": res.method,
        },
        "diagnostics": asdict(assumption_diagnostics(w or WeightScheme.uniform(sample), sample)),
    }
    status = EXIT_OK
    error = None
    if not res.converged:
        error = f"solver did not converge for {fam.label} (gradient norm {res.final_gradient_norm:.3g})"
        status = EXIT_NUMERIC
    else:
        a = res.theta_hat if args.eval_point is None else _parse_point(args.eval_point, sample.d)
        try:
            rep = sigma_hat(sample, w, fam, a)
        except SingularCovarianceError as exc:
            error = str(exc)
            status = EXIT_NUMERIC
        else:
            cov_path = out / "covariance.csv"
            write_covariance_csv(cov_path, rep)
            manifest.add_output(cov_path)
            result["covariance"] = rep.to_dict()
    result["error"] = error
    result_path = out / "result.json"
    with open(result_path, "w") as fh:
        json.dump(result, fh, indent=2, ensure_ascii=False)
        fh.write("\n")
    manifest.add_output(result_path)
    manifest.write(out / "manifest.json")
    if error:
        print(f"wmest estimate: {error}", file=sys.stderr)
    else:
        print(",".join(repr(float(v)) for v in res.theta_hat))
    return status


# ---------------------------------------------------------------------------
# optimize-weights
# ---------------------------------------------------------------------------


def cmd_optimize_weights(args) -> int:
    out = _out_dir(args.out_dir)
    cfg = _load_config(args)
    manifest = RunManifest(command="optimize-weights", config_path=str(args.config), seed=cfg.seed)
    manifest.notes["eval_point"] = cfg.eval_point
    manifest.notes["replications"] = cfg.replications

    stats = pooled_statistics(cfg, workers=args.workers)
    opts = WeightOptions(floor=args.floor)
    single = len(cfg.estimators) == 1
    ids = list(range(1, cfg.configuration.n + 1))
    summary = {}
    for fam, st in zip(cfg.estimators, stats):
        try:
            res = optimize_weights_stats(st, opts)
        except SingularCovarianceError as exc:
            raise NumericalFailure(str(exc)) from None
        suffix = "" if single else f"_{key_for_family(fam)}"
        wpath = out / f"weights{suffix}.csv"
        tpath = out / f"trace{suffix}.csv"
        write_weights_csv(wpath, ids, res.sizes, res.weights)
        write_csv(tpath, ["sweep", "det_sigma"], enumerate(res.trace))
        manifest.add_output(wpath)
        manifest.add_output(tpath)
        summary[fam.label] = {
            "objective": res.objective,
            "unweighted_objective": res.unweighted_objective,
            "iterations": res.iterations,
            "converged": res.converged,
        }
        print(f"{fam.label}: det ratio {res.unweighted_objective / res.objective:.6g}, "
              f"weights {np.round(res.weights, 4).tolist()}")
    manifest.notes["optimizer"] = summary
    manifest.write(out / "manifest.json")
    return EXIT_OK


def _load_config(args) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.load(args.config)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{args.config}: {exc}") from None
    if args.seed is not None and args.seed != cfg.seed:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    return cfg


def cmd_simulate(args) -> int:
    out = _out_dir(args.out_dir)
    cfg = _load_config(args)
    manifest = RunManifest(command="simulate", config_path=str(args.config), seed=cfg.seed)
    manifest.notes["config"] = cfg.to_dict()
    rep = run_experiment(cfg, workers=args.workers)
    path = out / "report.csv"
    write_csv(path, REPORT_HEADER, rep.rows())
    manifest.add_output(path)
    if cfg.record_estimates:
        rows = []
        for s in rep.summaries:
            for r in range(cfg.replications):
                rows.append([s.estimator, r, "unweighted", bool(s.converged[r]), *s.theta_hat[r]])
                rows.append([s.estimator, r, "weighted", bool(s.converged_w[r]), *s.theta_hat_w[r]])
        epath = out / "estimates.csv"
        header = ["estimator", "replication", "weights", "converged"] + [
            f"theta_{k + 1}" for k in range(cfg.distribution.d)
        ]
        write_csv(epath, header, rows)
        manifest.add_output(epath)
    manifest.write(out / "manifest.json")
    for s in rep.summaries:
        print(f"{s.estimator}: efficiency {s.efficiency:.4f} (se {s.efficiency_stderr:.4f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# breakdown
# ---------------------------------------------------------------------------


BREAKDOWN_HEADER = ["config", "rho", "estimator", "k_star", "epsilon", "prefix_sum", "k1", "k0", "threshold", "N"]


def cmd_breakdown(args) -> int:
    out = _out_dir(args.out_dir)
    table = read_weights_csv(args.weights)
    if args.sample:
        sample = read_sample_csv(args.sample)
        lookup = dict(zip(table.ids, table.weights))
        missing = [i for i in sample.ids if i not in lookup]
        if missing:
            raise InputError(f"{args.weights}: no weight for cluster ids {missing}")
        cw = np.array([lookup[i] for i in sample.ids])
        sizes = sample.sizes
    elif table.sizes is not None:
        cw, sizes = table.weights, table.sizes
    else:
        raise InputError("cluster sizes unknown: use a cluster_id,m_i,w_i weights file or pass --sample")

    manifest = RunManifest(command="breakdown", config_path=str(args.weights))
    N = int(np.sum(sizes))
    scaled = normalize(cw, sizes)
    if np.max(np.abs(scaled - cw)) > 1e-9:
        manifest.notes["renormalized"] = "weights rescaled so that sum m_i w_i = N"
    wobs = expand_cluster_weights(scaled, sizes)

    if args.spatial_median_exact:
        eps_n = spatial_median_eps(N)
        manifest.notes["eps_star"] = f"spatial-median finite-sample value {eps_n}"
        if eps_n == 0:
            raise InputError(f"N={N} is too small for a positive spatial-median breakdown point")
        k1, k0 = breakdown_bracket(wobs, float(eps_n), 0.5)
        rep = breakdown_exact(wobs, float(eps_n))
    else:
        eps = args.eps_star
        manifest.notes["eps_star"] = eps
        try:
            rep = breakdown_exact(wobs, eps)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        k1 = k0 = rep.k_star
    row = [args.config or "", "" if args.rho is None else args.rho, args.estimator or "",
           rep.k_star, float(rep.epsilon_star), rep.prefix_sum_at_k, k1, k0, rep.threshold_used, N]
    path = out / "breakdown.csv"
    write_csv(path, BREAKDOWN_HEADER, [row])
    manifest.add_output(path)
    manifest.write(out / "manifest.json")
    print(f"k*={rep.k_star} of N={N}: breakdown {100 * float(rep.epsilon_star):.2f}% (bracket k1={k1}, k0={k0})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# reproduce
# ---------------------------------------------------------------------------


def cmd_reproduce(args) -> int:
    out = _out_dir(args.out_dir)
    seed = default_seed() if args.seed is None else args.seed
    configs = tuple(args.configs.split(",")) if args.configs else ("C1", "C2", "C3", "C4")
    bad = [c for c in configs if c not in ("C1", "C2", "C3", "C4")]
    if bad:
        raise InputError(f"unknown configuration(s) {bad}")
    manifest = RunManifest(command=f"reproduce --table {args.table}", seed=seed)
    manifest.notes["replications"] = args.replications
    manifest.notes["configs"] = list(configs)
    rows = reproduce(args.table, seed, args.replications, workers=args.workers, configs=configs)
    path = out / f"{args.table}.csv"
    write_csv(path, ROW_HEADER, rows)
    manifest.add_output(path)
    flagged = [r for r in rows if r[-1] in ("PASS", "FAIL")]
    passed = sum(r[-1] == "PASS" for r in flagged)
    manifest.notes["cells_pass"] = passed
    manifest.notes["cells_flagged"] = len(flagged)
    manifest.write(out / "manifest.json")
    print(f"{args.table}: {passed}/{len(flagged)} cells within tolerance -> {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wmest", description="Weighted M-estimation for clustered multivariate data.")
    p.add_argument("--version", action="version", version=f"wmest {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", help="point estimate and sandwich covariance")
    e.add_argument("sample", help="CSV with cluster_id,x1,...,xd")
    e.add_argument("weights", nargs="?", help="CSV with per-cluster weights (default w ≡ 1)")
    e.add_argument("--family", default="spatial-median",
                   help="mean, spatial-median, huber or lp-median (default spatial-median)")
    e.add_argument("--huber-k", type=float, default=1.345)
    e.add_argument("--lp-p", type=float, default=3.0)
    e.add_argument("--tol", type=float, default=1e-10, help="gradient-norm tolerance")
    e.add_argument("--eval-point", help="evaluate the covariance at this point instead of the estimate")
    e.add_argument("--out-dir", default=".")
    e.set_defaults(func=cmd_estimate)

    o = sub.add_parser("optimize-weights", help="efficiency-optimal weights for a simulation design")
    o.add_argument("config", help="experiment configuration JSON")
    o.add_argument("--seed", type=int, default=None, help="override the config seed")
    o.add_argument("--floor", type=float, default=1e-6)
    o.add_argument("--workers", type=int, default=1)
    o.add_argument("--out-dir", default=".")
    o.set_defaults(func=cmd_optimize_weights)

    m = sub.add_parser("simulate", help="run a Monte Carlo experiment and write its report")
    m.add_argument("config", help="experiment configuration JSON")
    m.add_argument("--seed", type=int, default=None, help="override the config seed")
    m.add_argument("--workers", type=int, default=1)
    m.add_argument("--out-dir", default=".")
    m.set_defaults(func=cmd_simulate)

    b = sub.add_parser("breakdown", help="finite-sample breakdown point of a weight vector")
    b.add_argument("weights", help="CSV with cluster_id,m_i,w_i (or cluster_id,weight plus --sample)")
    g = b.add_mutually_exclusive_group(required=True)
    g.add_argument("--eps-star", type=float, help="breakdown point of the unweighted estimator")
    g.add_argument("--spatial-median-exact", action="store_true",
                   help="use the spatial median's finite-sample value floor((N-1)/2)/N, bracket against 1/2")
    b.add_argument("--sample", help="sample CSV supplying the cluster sizes")
    b.add_argument("--config", default=None, help="label written to the config column")
    b.add_argument("--rho", type=float, default=None, help="label written to the rho column")
    b.add_argument("--estimator", default=None, help="label written to the estimator column")
    b.add_argument("--out-dir", default=".")
    b.set_defaults(func=cmd_breakdown)

    r = sub.add_parser("reproduce", help="regenerate a reference table and compare")
    r.add_argument("--table", required=True, help="one of: " + ", ".join(TABLES))
    r.add_argument("--seed", type=int, default=None, help="default: $WMEST_SEED or 20150101")
    r.add_argument("--replications", type=int, default=500)
    r.add_argument("--configs", default=None, help="comma-separated subset of C1,C2,C3,C4")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--out-dir", default=".")
    r.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; usage errors are input errors here
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "table", None) is not None and args.table not in TABLES:
        print(f"wmest: unknown table {args.table!r}; choose from {', '.join(TABLES)}", file=sys.stderr)
        return EXIT_INPUT
    if getattr(args, "replications", 1) < 1:
        print("wmest: --replications must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (InputError, InputFormatError, FileNotFoundError) as exc:
        print(f"wmest: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalFailure, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"wmest: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"wmest: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
