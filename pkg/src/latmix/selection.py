"""Marginal likelihoods and AIC/BIC selection of the number of experts.

The per-cluster marginal likelihood integrates the mixture over
``pi_i ~ Dir(alpha_i)``. ``log_ml_mc`` estimates it by averaging over
Dirichlet draws; ``log_ml_exact`` sums over all ``K**n_i`` label
configurations and is only feasible for tiny clusters, where it serves as an
oracle for the Monte Carlo routines.
"""

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import digamma, gammaln, logsumexp

from . import _rng, dirichlet
from .core import (COVARIATE, CRITERIA, STATIC, FitError, LatmixError, McemConfig,
                   ValidationError)
from .expert import log_density_matrix

ENUMERATION_LIMIT = 10 ** 6


@dataclass
class SelectConfig:
    B: int = 10_000
    K_range: tuple = tuple(range(1, 9))
    criterion: str = "bic"
    n_jobs: int = 1

    def __post_init__(self):
        self.K_range = tuple(int(k) for k in self.K_range)
        self.criterion = self.criterion.lower()
        if self.B < 1 or not self.K_range:
            raise ValidationError("B must be >= 1 and K_range nonempty")
        if self.criterion not in CRITERIA:
            raise ValidationError(f"criterion must be one of {CRITERIA}")


def _log_terms(cluster, experts, alpha_i, B, rng, chunk=20_000):
    """Per-draw log integrands ``sum_j log sum_k pi_k h_k(y_j)``."""
    logh = log_density_matrix(experts, cluster.y, cluster.X)
    if logh.shape[0] == 0:
        return np.zeros(B)
    shift = logh.max(axis=1, keepdims=True)
    Hs = np.exp(logh - shift)
    out = np.empty(B)
    for start in range(0, B, chunk):
        stop = min(B, start + chunk)
        pi = dirichlet.sample(alpha_i, rng, size=stop - start)
        out[start:stop] = np.log(pi @ Hs.T).sum(axis=1)
    return out + shift.sum()


def log_ml_mc(cluster, experts, alpha_i, B, rng, return_se=False):
    """Monte Carlo log marginal likelihood of one cluster.

    With ``return_se`` the delta-method standard error of the log estimate is
    also returned.
    """
    terms = _log_terms(cluster, experts, np.asarray(alpha_i, dtype=float), int(B), rng)
    est = float(logsumexp(terms) - np.log(B))
    if not np.isfinite(est):
        raise LatmixError(f"marginal likelihood underflow in cluster {cluster.id!r}")
    if not return_se:
        return est
    v = np.exp(terms - terms.max())
    se = float(v.std(ddof=1) / np.sqrt(B) / v.mean()) if B > 1 else np.inf
    return est, se


def _configurations(n, K):
    if K ** n > ENUMERATION_LIMIT:
        raise ValidationError(f"enumeration over {K}**{n} label configurations exceeds the guard")
    return np.array(list(itertools.product(range(K), repeat=n)), dtype=int).reshape(K ** n, n)


def _enumerate(cluster, experts, alpha_i):
    alpha = np.asarray(alpha_i, dtype=float)
    K = len(experts)
    logh = log_density_matrix(experts, cluster.y, cluster.X)
    n = logh.shape[0]
    Z = _configurations(n, K)
    counts = np.stack([(Z == k).sum(axis=1) for k in range(K)], axis=1)
    log_w = (gammaln(alpha.sum()) - gammaln(alpha).sum()
             + gammaln(counts + alpha).sum(axis=1) - gammaln(n + alpha.sum()))
    log_lik = logh[np.arange(n), Z].sum(axis=1) if n else np.zeros(len(Z))
    return Z, counts, log_w + log_lik


def log_ml_exact(cluster, experts, alpha_i) -> float:
    """Exact log marginal likelihood by enumerating every label configuration."""
    _, _, log_terms = _enumerate(cluster, experts, alpha_i)
    return float(logsumexp(log_terms))


def posterior_exact(cluster, experts, alpha_i):
    """Exact ``(z_star, logpi_star, pi_hat)`` by enumeration; the oracle for the Gibbs E-step."""
    alpha = np.asarray(alpha_i, dtype=float)
    Z, counts, log_terms = _enumerate(cluster, experts, alpha)
    post = np.exp(log_terms - logsumexp(log_terms))
    n, K = Z.shape[1], len(experts)
    z_star = np.stack([post @ (Z == k) for k in range(K)], axis=1) if n else np.zeros((0, K))
    a = counts + alpha
    pi_hat = post @ (a / a.sum(axis=1, keepdims=True))
    logpi_star = post @ (digamma(a) - digamma(a.sum(axis=1, keepdims=True)))
    return z_star, logpi_star, pi_hat


def n_params(K, dim_phi, mixing_kind=STATIC, q=0) -> int:
    """Free parameter count used in the information criteria.

    ``dim_phi`` counts every expert parameter (for the Gaussian family the
    variance is included). A single expert has no Dirichlet layer.
    """
    if K == 1:
        return dim_phi
    if mixing_kind == COVARIATE:
        return K * (dim_phi + q)
    return K * dim_phi + K


def criteria(total_log_ml, k_params, N):
    return (-2.0 * total_log_ml + 2.0 * k_params,
            -2.0 * total_log_ml + k_params * np.log(max(N, 1)))


def information_criteria(dataset, fit):
    """``(aic, bic)`` for a fit carrying per-cluster log marginal likelihoods."""
    return criteria(float(np.sum(fit.log_ml)), fit.n_params, dataset.N)


def sweep(dataset, config=None, family="gaussian", mixing_kind=STATIC, mcem_config=None):
    """Fit every ``K`` in ``config.K_range``; returns ``{K: FitResult or exception}``.

    Each K draws from its own sub-stream of ``mcem_config.seed``, so results do
    not depend on ``n_jobs``. ``config.B`` sets the number of Monte Carlo draws
    for the marginal likelihoods, overriding ``mcem_config.ml_draws``.
    """
    from .mcem import fit, fit_single

    config = config or SelectConfig()
    mcem_config = replace(mcem_config or McemConfig(), ml_draws=config.B)

    def one(K):
        try:
            if K == 1:
                return fit_single(dataset, family, mixing_kind)
            return fit(dataset, K, family, mixing_kind, mcem_config, seed_key=("K", K))
        except LatmixError as exc:
            return exc

    if config.n_jobs > 1:
        with ThreadPoolExecutor(config.n_jobs) as pool:
            results = list(pool.map(one, config.K_range))
    else:
        results = [one(K) for K in config.K_range]
    return dict(zip(config.K_range, results))


def choose(fits, criterion="bic"):
    """Pick the fit minimizing the criterion; ties go to the smaller K."""
    ok = {K: f for K, f in fits.items() if not isinstance(f, Exception)}
    if not ok:
        errors = "; ".join(f"K={K}: {e}" for K, e in fits.items())
        raise FitError(f"every candidate fit failed ({errors})")
    return min(ok.values(), key=lambda f: (getattr(f, criterion.lower()), f.K))


def select_k(dataset, config=None, family="gaussian", mixing_kind=STATIC, mcem_config=None):
    config = config or SelectConfig()
    return choose(sweep(dataset, config, family, mixing_kind, mcem_config), config.criterion)
