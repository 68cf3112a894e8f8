"""Simulation scenarios, the integrated squared error, and the replication harness.

Scenario I mixes the lines ``-1 + x`` and ``1 - x`` with ``pi_i ~ Beta(5, 3)``.
Scenario II puts clusters 1-15, 16-30 and 31-50 on three different lines.
Scenario III is Scenario I with ``pi_i ~ Beta(exp(1 + 0.6 w_i), exp(1 - 0.5 w_i))``
and ``w_i ~ Bernoulli(0.4)``, with ``n_i = i``. Covariates are ``x ~ N(0, 1)``.

Design matrices include an intercept column, ``x_ij = (1, x)``; Scenario III
clusters carry ``w_i = (1, w)``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import _rng, dirichlet
from .baselines import fit_gm, fit_lm, fit_ri
from .core import COVARIATE, STATIC, Cluster, LatmixError, McemConfig, ValidationError, validate_dataset
from .predict import cluster_density
from .selection import SelectConfig, select_k

log = logging.getLogger(__name__)

SCENARIOS = ("I", "II", "III")
METHODS = ("LMR", "LMR-CD", "GM", "LM", "RI")
CSV_COLUMNS = ["replication", "method", "scenario", "x", "cluster_id", "n_i", "mise"]

QUAD_LO, QUAD_HI, QUAD_STEP = -12.0, 12.0, 0.005

_LINES_I = ((-1.0, 1.0, 1.0), (1.0, -1.0, 1.0))  # (intercept, slope, variance)
_LINES_II = ((-1.0, 2.0, 0.25), (1.5, 1.0, 1.0), (0.0, -1.0, 2.25))


def _normal(t, mean, var):
    return np.exp(-0.5 * (t - mean) ** 2 / var) / np.sqrt(2 * np.pi * var)


def quad_grid(lo=QUAD_LO, hi=QUAD_HI, step=QUAD_STEP) -> np.ndarray:
    n = int(round((hi - lo) / step)) + 1
    return np.linspace(lo, hi, n)


@dataclass
class ScenarioSpec:
    scenario: str = "I"
    m: int = 50
    n: int = 30
    n_rule: str = "constant"
    R: int = 100
    x_eval: tuple = (-1.5, -0.75, 0.0)
    seed: int = 0

    def __post_init__(self):
        self.scenario = str(self.scenario).upper()
        if self.scenario not in SCENARIOS:
            raise ValidationError(f"unknown scenario {self.scenario!r}")
        if self.scenario == "III" and self.n_rule == "constant":
            self.n_rule = "index"
        if self.n_rule not in ("constant", "index"):
            raise ValidationError("n_rule must be 'constant' or 'index'")
        if self.R < 1 or not len(self.x_eval):
            raise ValidationError("R must be >= 1 and x_eval nonempty")
        if self.m < 1:
            raise ValidationError("m must be >= 1")
        if self.scenario == "II" and self.m != 50:
            raise ValidationError("scenario II is defined for exactly m = 50 clusters")
        self.x_eval = tuple(float(x) for x in self.x_eval)

    def sizes(self):
        if self.n_rule == "index":
            return np.arange(1, self.m + 1)
        return np.full(self.m, self.n)


@dataclass
class TrueDensity:
    """Exact conditional densities of a generated dataset.

    ``components[i]`` lists ``(weight, intercept, slope, variance)`` for cluster ``i``.
    """

    cluster_ids: list
    components: list
    pi: np.ndarray = None

    def __call__(self, cluster_id, t, x):
        i = self.cluster_ids.index(str(cluster_id))
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for wt, a, b, v in self.components[i]:
            if wt > 0:
                out += wt * _normal(t, a + b * x, v)
        return out


def cluster_ids(m):
    width = max(3, len(str(m)))
    return [f"c{i:0{width}d}" for i in range(1, m + 1)]


def generate(spec: ScenarioSpec, replication: int, pi_override=None):
    """Simulate one replication; returns ``(dataset, TrueDensity)``.

    ``pi_override`` fixes the first-component weight of every cluster
    (Scenarios I and III), which is handy for checking the generator.
    """
    rng = _rng.stream(spec.seed, "simulate", spec.scenario, int(replication))
    ids = cluster_ids(spec.m)
    sizes = spec.sizes()
    clusters, comps, pis = [], [], []
    for i in range(spec.m):
        n = int(sizes[i])
        w = None
        if spec.scenario == "II":
            block = 0 if i < 15 else (1 if i < 30 else 2)
            comp = [(1.0, *_LINES_II[block])]
            pi = np.nan
        else:
            if spec.scenario == "I":
                alpha = np.array([5.0, 3.0])
            else:
                wi = float(rng.random() < 0.4)
                alpha = np.exp([1 + 0.6 * wi, 1 - 0.5 * wi])
                w = np.array([1.0, wi])
            pi = float(dirichlet.sample(alpha, rng)[0]) if pi_override is None else float(pi_override)
            comp = [(pi, *_LINES_I[0]), (1 - pi, *_LINES_I[1])]
        x = rng.normal(size=n)
        labels = rng.random(n)
        y = np.empty(n)
        cum = np.cumsum([c[0] for c in comp])
        which = np.minimum(np.searchsorted(cum, labels, side="right"), len(comp) - 1)
        for k, (_, a, b, v) in enumerate(comp):
            sel = which == k
            y[sel] = a + b * x[sel] + np.sqrt(v) * rng.normal(size=sel.sum())
        clusters.append(Cluster(ids[i], y, np.column_stack([np.ones(n), x]), w))
        comps.append(comp)
        pis.append(pi)
    dataset = validate_dataset(clusters)
    return dataset, TrueDensity(ids, comps, np.array(pis))


def ise(estimate, oracle, cluster_id, x, grid=None) -> float:
    """Integrated squared error of one cluster's density at covariate value ``x``."""
    grid = quad_grid() if grid is None else grid
    diff = np.asarray(estimate(grid), dtype=float) - np.asarray(oracle(grid), dtype=float)
    return float(np.trapezoid(diff ** 2, grid))


def mise(estimate, oracle, x, clusters, grid=None) -> np.ndarray:
    """Per-cluster integrated squared error at covariate value ``x``.

    ``estimate`` and ``oracle`` are callables ``f(cluster_id, t, x)``. This is
    the error of a single replication; averaging over replications gives the
    MISE.
    """
    grid = quad_grid() if grid is None else grid
    return np.array([
        ise(lambda t: estimate(c, t, x), lambda t: oracle(c, t, x), c, x, grid) for c in clusters
    ])


@dataclass
class ExperimentConfig:
    mcem: McemConfig = field(default_factory=McemConfig)
    select: SelectConfig = field(default_factory=SelectConfig)
    baseline_K_range: tuple = tuple(range(1, 9))


@dataclass
class ExperimentResult:
    table: pd.DataFrame
    failures: dict
    selected_K: dict

    def summary(self) -> pd.DataFrame:
        """Cluster-averaged MISE per (method, x)."""
        mise_ = self.table.groupby(["method", "x", "cluster_id"])["mise"].mean()
        return mise_.groupby(["method", "x"]).mean().unstack("x")

    def cluster_mise(self) -> pd.DataFrame:
        return self.table.groupby(["method", "x", "cluster_id", "n_i"], as_index=False)["mise"].mean()


def _lmr_densities(fit):
    def density(cid, t, x):
        return cluster_density(fit, cid, np.array([1.0, x]), t)
    return density


def fit_method(method, dataset, config, seed):
    """Fit one comparison method; returns ``(density callable, selected K or None)``."""
    mcem_cfg = McemConfig(**{**config.mcem.__dict__, "seed": seed})
    if method in ("LMR", "LMR-CD"):
        kind = COVARIATE if method == "LMR-CD" else STATIC
        f = select_k(dataset, config.select, "gaussian", kind, mcem_cfg)
        return _lmr_densities(f), f.K
    Kr, crit = config.baseline_K_range, config.select.criterion
    if method == "GM":
        gm = fit_gm(dataset, Kr, crit, _rng.child(seed, "GM"))
        return (lambda cid, t, x: gm.density(cid, np.array([1.0, x]), t)), gm.fit.K
    if method == "LM":
        lm = fit_lm(dataset, Kr, crit, _rng.child(seed, "LM"))
        return (lambda cid, t, x: lm.density(cid, np.array([1.0, x]), t)), None
    if method == "RI":
        ri = fit_ri(dataset)
        return (lambda cid, t, x: ri.density(cid, np.array([1.0, x]), t)), None
    raise ValidationError(f"unknown method {method!r}")


def run_replication(spec, methods, config, r, grid=None):
    grid = quad_grid() if grid is None else grid
    dataset, oracle = generate(spec, r)
    rows, failures, chosen = [], {}, {}
    for method in methods:
        try:
            density, K = fit_method(method, dataset, config, _rng.child(spec.seed, "fit", method, r))
        except LatmixError as exc:
            log.warning("replication %d: %s failed: %s", r, method, exc)
            failures[method] = failures.get(method, 0) + 1
            continue
        chosen[method] = K
        for x in spec.x_eval:
            for c in dataset.clusters:
                try:
                    err = ise(lambda t: density(c.id, t, x), lambda t: oracle(c.id, t, x), c.id, x, grid)
                except LatmixError:
                    err = np.nan
                rows.append((r, method, spec.scenario, x, c.id, c.n, err))
    return rows, failures, chosen


def run_experiment(spec, methods=("LMR", "GM", "LM", "RI"), config=None, replications=None,
                   grid=None) -> ExperimentResult:
    """Generate, fit and score ``spec.R`` replications.

    ``table`` has one row per (replication, method, x, cluster) with that
    replication's integrated squared error in the ``mise`` column; rows for
    clusters a method could not fit carry NaN. ``failures`` counts whole-method
    failures and ``selected_K`` records the chosen number of components.
    """
    config = config or ExperimentConfig()
    for method in methods:
        if method not in METHODS:
            raise ValidationError(f"unknown method {method!r}")
    rows, failures, selected = [], {}, {m: [] for m in methods}
    reps = range(spec.R) if replications is None else replications
    for r in reps:
        rrows, rfail, chosen = run_replication(spec, methods, config, r, grid)
        rows.extend(rrows)
        for k, v in rfail.items():
            failures[k] = failures.get(k, 0) + v
        for k, v in chosen.items():
            selected[k].append(v)
    table = pd.DataFrame(rows, columns=CSV_COLUMNS)
    return ExperimentResult(table, failures, selected)
