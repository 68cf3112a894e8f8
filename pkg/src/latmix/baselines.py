"""Comparison models: global mixture (GM), local mixture (LM), random intercept (RI).

GM fits one mixture of normal linear regressions to the pooled data, LM fits
one to every cluster separately, and RI is the Gaussian linear mixed model
``y_ij = x_ij @ beta + v_i + e_ij``. All three expose
``density(cluster_id, x, grid)`` so they can be scored like the latent
mixture fits.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import _rng
from .core import GAUSSIAN, ConvergenceError, ExpertParams, FitError, LatmixError, ValidationError
from .expert import SIGMA2_FLOOR, log_density_matrix, weighted_mle
from .predict import mixture_density


@dataclass
class MixtureRegressionFit:
    K: int
    weights: np.ndarray
    experts: list
    loglik: float
    n_obs: int
    history: list = field(repr=False, default_factory=list)

    @property
    def n_params(self) -> int:
        return self.K * (len(self.experts[0].beta) + 1) + self.K - 1

    @property
    def aic(self) -> float:
        return -2 * self.loglik + 2 * self.n_params

    @property
    def bic(self) -> float:
        return -2 * self.loglik + self.n_params * np.log(self.n_obs)

    def density(self, x, grid):
        return mixture_density(self.experts, self.weights, x, grid)


def _em_from(y, X, weights, experts, max_iter, tol):
    history = []
    for _ in range(max_iter):
        logp = log_density_matrix(experts, y, X) + np.log(weights)
        norm = logsumexp(logp, axis=1)
        ll = float(norm.sum())
        history.append(ll)
        if len(history) > 1 and abs(history[-1] - history[-2]) < tol * (1 + abs(ll)):
            return weights, experts, ll, history
        R = np.exp(logp - norm[:, None])
        weights = R.mean(axis=0)
        experts = [weighted_mle(GAUSSIAN, y, X, R[:, k], ridge=True) for k in range(len(experts))]
    raise ConvergenceError(f"EM did not converge in {max_iter} iterations", (weights, experts))


def _partition_start(y, X, groups, K):
    experts = [weighted_mle(GAUSSIAN, y, X, (groups == g).astype(float), ridge=True)
               for g in range(K)]
    return np.full(K, 1.0 / K), experts


def em_mixture_regression(y, X, K, rng, n_starts=3, max_iter=1000, tol=1e-8):
    """Maximum-likelihood mixture of ``K`` normal linear regressions by EM.

    The first start slices the pooled OLS residuals into ``K`` quantile groups;
    the others use random partitions of the observations. The start with the
    highest log-likelihood is returned. Fits where a component ends up with
    fewer effective observations than it has parameters are rejected as
    degenerate.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    N, p = X.shape
    if K == 1:
        e = weighted_mle(GAUSSIAN, y, X, np.ones(N), ridge=True)
        ll = float(log_density_matrix([e], y, X).sum())
        return MixtureRegressionFit(1, np.ones(1), [e], ll, N, [ll])
    best, last_error = None, None
    for s in range(n_starts):
        if s == 0:
            ols = weighted_mle(GAUSSIAN, y, X, np.ones(N), ridge=True)
            resid = y - X @ ols.beta
            groups = np.argsort(np.argsort(resid, kind="stable"), kind="stable") * K // N
        else:
            groups = np.empty(N, dtype=int)
            for g, part in enumerate(np.array_split(rng.permutation(N), K)):
                groups[part] = g
        try:
            weights, experts = _partition_start(y, X, groups, K)
            weights, experts, ll, hist = _em_from(y, X, weights, experts, max_iter, tol)
        except LatmixError as exc:
            last_error = exc
            continue
        if np.any(weights * N < p + 1) or any(e.sigma2 <= 10 * SIGMA2_FLOOR for e in experts):
            last_error = FitError(f"degenerate {K}-component solution")
            continue
        if best is None or ll > best.loglik:
            best = MixtureRegressionFit(K, weights, experts, ll, N, hist)
    if best is None:
        raise last_error
    return best


def _select(y, X, K_range, criterion, seed):
    fits = {}
    for K in K_range:
        try:
            fits[K] = em_mixture_regression(y, X, K, _rng.stream(seed, "mixreg", K))
        except LatmixError:
            continue
    if not fits:
        raise FitError("no mixture-of-regressions fit succeeded")
    return min(fits.values(), key=lambda f: (getattr(f, criterion), f.K)), fits


@dataclass
class GlobalMixture:
    fit: MixtureRegressionFit
    candidates: dict = field(repr=False, default_factory=dict)

    def density(self, cluster_id, x, grid):
        return self.fit.density(x, grid)


def fit_gm(dataset, K_range=range(1, 9), criterion="bic", seed=0) -> GlobalMixture:
    """One mixture of regressions for the pooled data, K chosen by ``criterion``."""
    y, X, _ = dataset.pooled()
    best, fits = _select(y, X, K_range, criterion, seed)
    return GlobalMixture(best, fits)


@dataclass
class LocalMixture:
    fits: dict
    forced: dict
    failures: dict

    def density(self, cluster_id, x, grid):
        f = self.fits.get(str(cluster_id))
        if f is None:
            raise FitError(f"no local fit for cluster {cluster_id!r}")
        return f.density(x, grid)


def feasible_K(n, p, K_range):
    """Candidate counts a cluster of ``n`` observations can support.

    Each component needs at least ``p + 2`` observations (its ``p + 1``
    parameters plus one). A single expert is always allowed.
    """
    ok = [K for K in K_range if K == 1 or n >= K * (p + 2)]
    return ok or [1]


def fit_lm(dataset, K_range=range(1, 9), criterion="bic", seed=0) -> LocalMixture:
    """Independent mixture-of-regressions fit in every cluster.

    Every cluster uses the same seed, so identical clusters get identical fits.
    ``forced[id]`` is True when the cluster was too small for the full
    ``K_range``.
    """
    K_range = list(K_range)
    fits, forced, failures = {}, {}, {}
    for c in dataset.clusters:
        cand = feasible_K(c.n, dataset.p, K_range)
        forced[c.id] = cand != K_range
        if c.n == 0:
            failures[c.id] = "cluster has no observations"
            continue
        try:
            fits[c.id], _ = _select(c.y, c.X, cand, criterion, seed)
        except LatmixError as exc:
            failures[c.id] = str(exc)
    return LocalMixture(fits, forced, failures)


@dataclass
class RandomIntercept:
    beta: np.ndarray
    tau2: float
    sigma2: float
    cluster_ids: list
    v_mean: np.ndarray
    v_var: np.ndarray
    boundary: bool
    history: list = field(repr=False, default_factory=list)

    def density(self, cluster_id, x, grid):
        i = self.cluster_ids.index(str(cluster_id))
        mu = float(np.asarray(x, dtype=float) @ self.beta) + self.v_mean[i]
        var = self.sigma2 + self.v_var[i]
        grid = np.asarray(grid, dtype=float)
        return np.exp(-0.5 * (grid - mu) ** 2 / var) / np.sqrt(2 * np.pi * var)


def _ri_loglik(r_sums, r_sq, sizes, tau2, sigma2):
    # y_i ~ N(X_i beta, sigma2 I + tau2 11'), via the closed-form determinant and inverse
    lam = sigma2 + sizes * tau2
    logdet = (sizes - 1) * np.log(sigma2) + np.log(lam)
    quad = (r_sq - tau2 * r_sums ** 2 / lam) / sigma2
    return float(-0.5 * np.sum(sizes * np.log(2 * np.pi) + logdet + quad))


def _ri_posterior(r_sums, sizes, tau2, sigma2):
    if tau2 == 0:
        return np.zeros_like(r_sums), np.zeros_like(r_sums)
    var = 1.0 / (1.0 / tau2 + sizes / sigma2)
    return var * r_sums / sigma2, var


def fit_ri(dataset, max_iter=20_000, tol=1e-10) -> RandomIntercept:
    """Random-intercept model by EM over the cluster effects.

    The predictive density for cluster ``i`` plugs in the posterior mean of
    ``v_i`` and inflates the variance by its posterior variance. If the
    between-cluster variance falls below ``1e-8 * sigma2`` it is set to zero
    and ``boundary`` is flagged.
    """
    y, X, idx = dataset.pooled()
    sizes = dataset.sizes.astype(float)
    m, N = dataset.m, len(y)
    if N == 0:
        raise ValidationError("random intercept model needs observations")
    XtX = X.T @ X
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    r = y - X @ beta
    means = np.bincount(idx, weights=r, minlength=m) / np.maximum(sizes, 1)
    tau2 = max(float(np.var(means[sizes > 0])), 1e-4 * float(np.var(r)) + 1e-12)
    sigma2 = max(float(np.var(r)) - tau2, 1e-2 * float(np.var(r)) + SIGMA2_FLOOR)

    def stats(beta):
        r = y - X @ beta
        return r, np.bincount(idx, weights=r, minlength=m), np.bincount(idx, weights=r * r, minlength=m)

    r, rs, rq = stats(beta)
    history = [_ri_loglik(rs, rq, sizes, tau2, sigma2)]
    converged = False
    for _ in range(max_iter):
        vm, vv = _ri_posterior(rs, sizes, tau2, sigma2)
        beta = np.linalg.solve(XtX, X.T @ (y - vm[idx]))
        resid = y - X @ beta - vm[idx]
        sigma2 = max(float((resid @ resid + sizes @ vv) / N), SIGMA2_FLOOR)
        tau2 = float(np.mean(vm ** 2 + vv))
        r, rs, rq = stats(beta)
        history.append(_ri_loglik(rs, rq, sizes, tau2, sigma2))
        if abs(history[-1] - history[-2]) < tol * (1 + abs(history[-1])):
            converged = True
            break
        if tau2 < 1e-8 * sigma2:
            break
    boundary = tau2 < 1e-8 * sigma2
    if boundary:
        tau2 = 0.0
        beta = np.linalg.solve(XtX, X.T @ y)
        resid = y - X @ beta
        sigma2 = max(float(resid @ resid / N), SIGMA2_FLOOR)
        r, rs, rq = stats(beta)
    elif not converged:
        raise ConvergenceError(f"random intercept EM did not converge in {max_iter} iterations",
                               (beta, tau2, sigma2))
    vm, vv = _ri_posterior(rs, sizes, tau2, sigma2)
    return RandomIntercept(beta, tau2, sigma2, dataset.ids, vm, vv, boundary, history)
