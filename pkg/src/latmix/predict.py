"""Fitted conditional densities on grids of response values."""

import numpy as np

from . import dirichlet
from .core import COVARIATE, GAUSSIAN, ValidationError
from .expert import log_density_rows


def component_densities(experts, x, grid) -> np.ndarray:
    """``(len(grid), K)`` matrix of ``h_k(t | x)``."""
    grid = np.asarray(grid, dtype=float)
    X = np.broadcast_to(np.asarray(x, dtype=float), (grid.size, len(experts[0].beta)))
    return np.column_stack([np.exp(log_density_rows(e, grid, X)) for e in experts])


def mixture_density(experts, weights, x, grid) -> np.ndarray:
    return component_densities(experts, x, grid) @ np.asarray(weights, dtype=float)


def cluster_density(fit, cluster_id, x, grid) -> np.ndarray:
    """Estimated density of cluster ``cluster_id`` using its posterior mean proportions."""
    i = fit.cluster_index(cluster_id)
    return mixture_density(fit.experts, fit.summaries.pi_hat[i], x, grid)


def marginal_weights(fit, w=None) -> np.ndarray:
    if fit.mixing.kind == COVARIATE:
        if w is None:
            raise ValidationError("marginal density under covariate-dependent mixing needs w")
        return dirichlet.cd_mean(fit.mixing.gamma, w)
    return dirichlet.mean(fit.mixing.alpha)


def marginal_density(fit, x, grid, w=None) -> np.ndarray:
    """Prior-mean mixture, which is also the density for a cluster with no data."""
    return mixture_density(fit.experts, marginal_weights(fit, w), x, grid)


def default_grid(fit, x, n=512) -> np.ndarray:
    """Equally spaced grid covering every component mean +- 6 standard deviations."""
    x = np.asarray(x, dtype=float)
    means = np.array([x @ e.beta for e in fit.experts])
    if fit.family == GAUSSIAN:
        s = np.sqrt(max(e.sigma2 for e in fit.experts))
        return np.linspace(means.min() - 6 * s, means.max() + 6 * s, n)
    lam = np.exp(means)
    hi = lam.max() + 6 * np.sqrt(lam.max())
    return np.arange(0, int(np.ceil(hi)) + 1, dtype=float)
