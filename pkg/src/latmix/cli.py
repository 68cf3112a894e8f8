"""Command-line front end: ``latmix fit | predict | simulate | evaluate``.

Input data are long-format CSV files with a ``cluster_id`` column, a
response ``y``, observation-level covariates ``x_1 .. x_p`` and optional
cluster-level covariates ``w_1 .. w_q``. An intercept column is prepended to
both ``X`` and ``W`` unless ``--no-intercept`` is given.

Fit artifacts are JSON documents carrying a ``format_version`` field. Every
command exits with 0 on success, 2 on invalid input, 3 on a numerical failure
and 4 when an iterative fit did not converge. Failures are reported on stderr
as a one-line JSON object.
"""

import argparse
import json
import os
import re
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd

from . import simulate as sim
from .core import (COVARIATE, CRITERIA, FAMILIES, GAUSSIAN, STATIC, Cluster, ClusteredDataset,
                   ConvergenceError, CovariateMixing, ExpertParams, FitResult, LatmixError,
                   McemConfig, NumericalError, PosteriorSummaries, StaticMixing, ValidationError,
                   validate_dataset)
from .predict import cluster_density, default_grid, marginal_density
from .selection import SelectConfig, choose, sweep

FORMAT_VERSION = 1
MARGINAL = "MARGINAL"

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_CONVERGENCE = 0, 2, 3, 4

STREAMS = {
    "fit": "child(seed, 'fit', 'K', K): root of one K-specific fit",
    "start": "child(fit, 'start', s): MCEM chain of start s; 'init' seeds its initialization",
    "estep": "child(start, 'estep', t, attempt) then 'cluster:<id>': Gibbs chain of one cluster "
             "at iteration t",
    "ml": "child(fit, 'start', s, 'ml', t) then 'cluster:<id>': marginal likelihood draws",
    "final": "child(fit, 'start', s, 'final') then 'cluster:<id>': posterior summaries reported",
}


class _NonConvergence(LatmixError):
    pass


def _numbered(columns, prefix):
    found = []
    for c in columns:
        m = re.fullmatch(rf"{prefix}_(\d+)", c)
        if m:
            found.append((int(m.group(1)), c))
    return [c for _, c in sorted(found)]


def read_dataset(path, intercept=True):
    """Load a long-format CSV into a :class:`ClusteredDataset`.

    A row with an empty ``y`` contributes no observation but still declares
    its cluster, which is how prediction-only clusters (``n_i = 0``) are
    written.
    """
    try:
        df = pd.read_csv(path, dtype={"cluster_id": str}, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None
    missing = [c for c in ("cluster_id", "y") if c not in df.columns]
    if missing:
        raise ValidationError(f"input is missing required columns {missing}")
    xcols, wcols = _numbered(df.columns, "x"), _numbered(df.columns, "w")
    try:
        X = df[xcols].to_numpy(dtype=float)
        W = df[wcols].to_numpy(dtype=float) if wcols else None
        y = df["y"].to_numpy(dtype=float)
    except ValueError as exc:
        raise ValidationError(f"non-numeric value in input: {exc}") from None
    if intercept:
        X = np.column_stack([np.ones(len(df)), X])
        if W is not None:
            W = np.column_stack([np.ones(len(df)), W])
    if X.shape[1] == 0:
        raise ValidationError("no covariates: add x_ columns or drop --no-intercept")
    ids = df["cluster_id"].to_numpy().astype(str)
    if W is not None:
        for col in wcols:
            varying = df.groupby("cluster_id")[col].nunique(dropna=False)
            bad = varying[varying > 1]
            if len(bad):
                raise ValidationError(
                    f"cluster {bad.index[0]!r}: cluster-level column {col!r} varies within the cluster")
    observed = ~np.isnan(y)
    clusters = []
    for cid in pd.unique(ids):
        rows = ids == cid
        keep = rows & observed
        w = None if W is None else W[np.flatnonzero(rows)[0]]
        clusters.append(Cluster(cid, y[keep], X[keep].reshape(-1, X.shape[1]), w))
    return validate_dataset(ClusteredDataset(tuple(clusters), X.shape[1]))


def _floats(a):
    return [float(v) for v in np.ravel(a)]


def fit_to_dict(fit, config=None, seed=None, intercept=True, created=True):
    """JSON-ready description of a fit."""
    doc = {
        "format_version": FORMAT_VERSION,
        "K": fit.K,
        "family": fit.family,
        "intercept": bool(intercept),
        "experts": [
            {"beta": _floats(e.beta), **({"sigma2": float(e.sigma2)} if e.family == GAUSSIAN else {})}
            for e in fit.experts
        ],
        "mixing": ({"kind": STATIC, "alpha": _floats(fit.mixing.alpha)}
                   if fit.mixing.kind == STATIC else
                   {"kind": COVARIATE, "gamma": [_floats(g) for g in fit.mixing.gamma]}),
        "clusters": [
            {"id": cid, "pi_hat": _floats(fit.summaries.pi_hat[i]),
             "logpi_star": _floats(fit.summaries.logpi_star[i]), "log_ml": float(fit.log_ml[i])}
            for i, cid in enumerate(fit.cluster_ids)
        ],
        "log_ml": float(np.sum(fit.log_ml)),
        "aic": float(fit.aic),
        "bic": float(fit.bic),
        "n_params": int(fit.n_params),
        "converged": bool(fit.converged),
        "iterations": int(fit.iterations),
        "start": int(fit.start),
        "seed": seed,
        "config": config or {},
        "streams": STREAMS,
    }
    if created:
        doc["created"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return doc


def fit_from_dict(doc):
    """Rebuild a :class:`FitResult` from :func:`fit_to_dict` output.

    Label probabilities are not stored, so ``summaries.z_star`` is empty.
    """
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported artifact format_version {doc.get('format_version')!r}")
    try:
        family = doc["family"]
        experts = [ExpertParams(family, e["beta"], e.get("sigma2")) for e in doc["experts"]]
        mix = doc["mixing"]
        mixing = (StaticMixing(mix["alpha"]) if mix["kind"] == STATIC
                  else CovariateMixing(np.array(mix["gamma"])))
        clusters = doc["clusters"]
        summaries = PosteriorSummaries([], np.array([c["logpi_star"] for c in clusters]),
                                       np.array([c["pi_hat"] for c in clusters]))
        return FitResult(K=doc["K"], family=family, experts=experts, mixing=mixing,
                         summaries=summaries, log_ml=np.array([c["log_ml"] for c in clusters]),
                         aic=doc["aic"], bic=doc["bic"], n_params=doc["n_params"],
                         cluster_ids=[c["id"] for c in clusters], converged=doc["converged"],
                         iterations=doc["iterations"], start=doc["start"])
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed fit artifact: {exc}") from None


def load_fit(path):
    """Read a fit artifact; returns ``(FitResult, document)``."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read fit artifact {path}: {exc}") from None
    return fit_from_dict(doc), doc


def _configs(args):
    mcem = McemConfig(L=args.gibbs_l, burn_in=args.burn_in, ml_draws=args.ml_draws,
                      max_iter=args.max_iter, n_starts=args.starts, seed=args.seed)
    if args.k is not None:
        K_range = (args.k,)
    else:
        K_range = tuple(range(1, args.k_max + 1))
    select = SelectConfig(B=args.ml_draws, K_range=K_range, criterion=args.criterion,
                          n_jobs=args.threads or os.cpu_count() or 1)
    return mcem, select


def _summary(fit, fits):
    lines = [f"K = {fit.K} ({fit.family}, {fit.mixing.kind} mixing), "
             f"log ML = {fit.total_log_ml:.4f}, AIC = {fit.aic:.4f}, BIC = {fit.bic:.4f}, "
             f"parameters = {fit.n_params}, iterations = {fit.iterations}, "
             f"converged = {fit.converged}"]
    for k, e in enumerate(fit.experts):
        extra = f", sigma2 = {e.sigma2:.4g}" if e.family == GAUSSIAN else ""
        lines.append(f"  expert {k + 1}: beta = {np.round(e.beta, 4).tolist()}{extra}")
    if fit.mixing.kind == STATIC:
        lines.append(f"  alpha = {np.round(fit.mixing.alpha, 4).tolist()}")
    else:
        lines.append(f"  gamma = {np.round(fit.mixing.gamma, 4).tolist()}")
    if len(fits) > 1:
        for K, f in fits.items():
            if isinstance(f, Exception):
                lines.append(f"  K={K}: failed ({f})")
            else:
                lines.append(f"  K={K}: AIC = {f.aic:.4f}, BIC = {f.bic:.4f}")
    return "\n".join(lines)


def cmd_fit(args):
    dataset = read_dataset(args.data, intercept=not args.no_intercept)
    mcem, select = _configs(args)
    fits = sweep(dataset, select, args.family, args.mixing, mcem)
    fit = choose(fits, args.criterion)
    config = {"data": str(args.data), "intercept": not args.no_intercept, "family": args.family,
              "mixing": args.mixing, "criterion": args.criterion, "K_range": list(select.K_range),
              "mcem": asdict(mcem), "candidates": {
                  str(K): ({"error": str(f)} if isinstance(f, Exception)
                           else {"aic": float(f.aic), "bic": float(f.bic)})
                  for K, f in fits.items()}}
    doc = fit_to_dict(fit, config, args.seed, intercept=not args.no_intercept)
    Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    print(_summary(fit, fits))
    if not fit.converged:
        raise _NonConvergence(f"selected K={fit.K} fit hit max_iter={mcem.max_iter} "
                              f"before the stopping rule fired; artifact written to {args.out}")
    return EXIT_OK


def _vector(text, name):
    try:
        return np.array([float(v) for v in text.split(",")], dtype=float)
    except ValueError:
        raise ValidationError(f"--{name} must be comma-separated numbers, got {text!r}") from None


def prediction_rows(fit, x, w=None, grid=None):
    """Density table ``(cluster_id, t, density)`` for every cluster plus the marginal."""
    if fit.mixing.kind == COVARIATE and w is None:
        raise ValidationError("covariate-dependent fit: --w is required for the marginal density")
    if len(x) != len(fit.experts[0].beta):
        raise ValidationError(f"x has length {len(x)}, the fit expects {len(fit.experts[0].beta)}")
    grid = default_grid(fit, x) if grid is None else np.asarray(grid, dtype=float)
    frames = [pd.DataFrame({"cluster_id": cid, "t": grid,
                            "density": cluster_density(fit, cid, x, grid)})
              for cid in fit.cluster_ids]
    frames.append(pd.DataFrame({"cluster_id": MARGINAL, "t": grid,
                                "density": marginal_density(fit, x, grid, w)}))
    return pd.concat(frames, ignore_index=True)


def cmd_predict(args):
    fit, doc = load_fit(args.fit)
    x = _vector(args.x, "x")
    w = None if args.w is None else _vector(args.w, "w")
    if doc.get("intercept", True):
        x = np.concatenate([[1.0], x])
        if w is not None:
            w = np.concatenate([[1.0], w])
    grid = None
    if args.grid is not None:
        lo, hi, n = args.grid.split(":")
        grid = np.linspace(float(lo), float(hi), int(n))
    elif fit.family == GAUSSIAN:
        grid = default_grid(fit, x, args.grid_points)
    table = prediction_rows(fit, x, w, grid)
    table.to_csv(args.out, index=False, float_format="%.17g")
    return EXIT_OK


def _spec(args, R):
    return sim.ScenarioSpec(args.scenario, m=args.m, n=args.n, R=R, seed=args.seed,
                            x_eval=tuple(_vector(args.x_eval, "x-eval")))


def dataset_frame(dataset):
    """Long-format table of a simulated dataset (intercept columns dropped)."""
    rows = []
    for c in dataset.clusters:
        df = pd.DataFrame({"cluster_id": c.id, "y": c.y})
        for j in range(1, c.X.shape[1]):
            df[f"x_{j}"] = c.X[:, j]
        if c.w is not None:
            for j in range(1, len(c.w)):
                df[f"w_{j}"] = c.w[j]
        rows.append(df)
    return pd.concat(rows, ignore_index=True)


def cmd_simulate(args):
    spec = _spec(args, args.r)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in range(spec.R):
        dataset, _ = sim.generate(spec, r)
        path = out / f"scenario_{spec.scenario}_rep{r:03d}.csv"
        dataset_frame(dataset).to_csv(path, index=False, float_format="%.17g")
        print(path)
    return EXIT_OK


def cmd_evaluate(args):
    if args.fit is not None:
        fit, doc = load_fit(args.fit)
        spec = _spec(args, args.replication + 1)
        dataset, oracle = sim.generate(spec, args.replication)
        if fit.cluster_ids != dataset.ids:
            raise ValidationError("fit artifact clusters do not match the simulated replication")
        lead = [1.0] if doc.get("intercept", True) else []

        def density(cid, t, x):
            return cluster_density(fit, cid, np.array(lead + [x]), t)

        grid = sim.quad_grid()
        rows = [(args.replication, args.method, spec.scenario, x, c.id, c.n,
                 sim.ise(lambda t: density(c.id, t, x), lambda t: oracle(c.id, t, x), c.id, x, grid))
                for x in spec.x_eval for c in dataset.clusters]
        table = pd.DataFrame(rows, columns=sim.CSV_COLUMNS)
    else:
        spec = _spec(args, args.r)
        methods = [m.strip().upper() for m in args.methods.split(",")]
        K_range = tuple(range(1, args.k_max + 1))
        config = sim.ExperimentConfig(
            mcem=McemConfig(L=args.gibbs_l, burn_in=args.burn_in, ml_draws=args.ml_draws,
                            max_iter=args.max_iter, n_starts=args.starts, seed=args.seed),
            select=SelectConfig(B=args.ml_draws, K_range=K_range, criterion=args.criterion,
                                n_jobs=args.threads or os.cpu_count() or 1),
            baseline_K_range=K_range)
        result = sim.run_experiment(spec, methods, config)
        table = result.table
        print(result.summary().to_string())
    table.to_csv(args.out, index=False, float_format="%.17g")
    return EXIT_OK


def _add_mcem_flags(p):
    p.add_argument("--k-max", type=int, default=8, help="largest K in the sweep (default 8)")
    p.add_argument("--criterion", choices=CRITERIA, default="bic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gibbs-l", type=int, default=500, help="retained Gibbs sweeps per E-step")
    p.add_argument("--burn-in", type=int, default=100)
    p.add_argument("--ml-draws", type=int, default=10_000,
                   help="Monte Carlo draws per cluster marginal likelihood")
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--starts", type=int, default=5)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for the K sweep (default: logical cores)")


def _add_scenario_flags(p):
    p.add_argument("--scenario", choices=sim.SCENARIOS, default="I")
    p.add_argument("--m", type=int, default=50)
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--x-eval", default="-1.5,-0.75,0")


def build_parser():
    parser = argparse.ArgumentParser(prog="latmix", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit or select a latent mixture model")
    p.add_argument("data", help="input CSV")
    p.add_argument("--out", default="fit.json")
    p.add_argument("--k", type=int, default=None, help="fixed number of experts (skips the sweep)")
    p.add_argument("--mixing", choices=(STATIC, COVARIATE), default=STATIC)
    p.add_argument("--family", choices=FAMILIES, default=GAUSSIAN)
    p.add_argument("--no-intercept", action="store_true")
    _add_mcem_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="conditional densities from a fit artifact")
    p.add_argument("fit")
    p.add_argument("--x", required=True, help="comma-separated covariates (without intercept)")
    p.add_argument("--w", default=None, help="cluster covariates for the marginal (cd mixing)")
    p.add_argument("--grid", default=None, help="lo:hi:n grid of response values")
    p.add_argument("--grid-points", type=int, default=512)
    p.add_argument("--out", default="density.csv")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", help="write simulated datasets")
    _add_scenario_flags(p)
    p.add_argument("--r", type=int, default=1, help="number of replications")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="MISE table, end-to-end or for one fit artifact")
    _add_scenario_flags(p)
    p.add_argument("--r", type=int, default=1, help="number of replications (end-to-end)")
    p.add_argument("--methods", default="lmr,gm,lm,ri")
    p.add_argument("--fit", default=None, help="score this artifact instead of fitting")
    p.add_argument("--replication", type=int, default=0, help="replication the artifact was fit to")
    p.add_argument("--method", default="LMR", help="method label for --fit rows")
    p.add_argument("--out", default="mise.csv")
    _add_mcem_flags(p)
    p.set_defaults(func=cmd_evaluate)
    return parser


def _fail(kind, exc, code):
    print(json.dumps({"error": kind, "exception": type(exc).__name__, "message": str(exc),
                      "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _NonConvergence as exc:
        return _fail("non-convergence", exc, EXIT_CONVERGENCE)
    except ConvergenceError as exc:
        return _fail("non-convergence", exc, EXIT_CONVERGENCE)
    except ValidationError as exc:
        return _fail("validation", exc, EXIT_VALIDATION)
    except (NumericalError, LatmixError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return _fail("numerical", exc, EXIT_NUMERICAL)


if __name__ == "__main__":
    sys.exit(main())
