"""Latent expert families: log-densities and weighted maximum likelihood.

Two families are supported, a normal linear regression (``gaussian``) and a
Poisson regression with log link (``poisson``). ``weighted_mle`` is the
per-component M-step, where the weights are posterior label probabilities.
"""

import warnings

import numpy as np
from scipy.special import gammaln

from .core import (GAUSSIAN, POISSON, ConvergenceError, DomainError, ExpertParams,
                   RankDeficiencyError, ValidationError)

SIGMA2_FLOOR = 1e-8
RIDGE = 1e-8
_LOG_2PI = np.log(2 * np.pi)


class RankDeficiencyWarning(RuntimeWarning):
    pass


def _check_counts(y):
    y = np.asarray(y, dtype=float)
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise DomainError("poisson responses must be nonnegative integers")
    return y


def log_density(params: ExpertParams, y, x) -> float:
    """Log-density (or log-mass) of one response ``y`` at covariate row ``x``."""
    x = np.asarray(x, dtype=float)
    if x.shape != params.beta.shape:
        raise ValidationError(f"x has length {x.size}, expected {params.beta.size}")
    return float(log_density_rows(params, np.atleast_1d(y), x[None, :])[0])


def log_density_rows(params: ExpertParams, y, X) -> np.ndarray:
    """Vectorized log-density for responses ``y`` (n,) at design rows ``X`` (n, p)."""
    y = np.asarray(y, dtype=float)
    eta = np.asarray(X, dtype=float) @ params.beta
    if params.family == GAUSSIAN:
        return -0.5 * (_LOG_2PI + np.log(params.sigma2) + (y - eta) ** 2 / params.sigma2)
    y = _check_counts(y)
    return y * eta - np.exp(eta) - gammaln(y + 1)


def log_density_matrix(experts, y, X) -> np.ndarray:
    """``(n, K)`` matrix of log h_k(y_j | x_j)."""
    if len(y) == 0:
        return np.zeros((0, len(experts)))
    return np.column_stack([log_density_rows(e, y, X) for e in experts])


def _solve_normal(A, b, ridge):
    p = A.shape[0]
    try:
        if np.linalg.matrix_rank(A, hermitian=True) < p:
            raise np.linalg.LinAlgError("rank deficient")
        return np.linalg.solve(A, b), False
    except np.linalg.LinAlgError:
        if not ridge:
            raise RankDeficiencyError("weighted normal equations are singular") from None
        warnings.warn("rank-deficient weighted design; adding ridge term", RankDeficiencyWarning)
        return np.linalg.solve(A + RIDGE * np.eye(p), b), True


def weighted_mle(family, y, X, weights, ridge=False, beta_init=None) -> ExpertParams:
    """Maximize ``sum_j w_j log h(y_j | x_j, phi)`` over ``phi``.

    Parameters
    ----------
    family : {"gaussian", "poisson"}
    y : array, shape (n,)
    X : array, shape (n, p)
    weights : array, shape (n,)
        Nonnegative observation weights; their sum must be positive.
    ridge : bool
        If the weighted normal equations are singular, add a ``1e-8`` ridge
        term (with a :class:`RankDeficiencyWarning`) instead of raising.
    beta_init : array, optional
        Starting point for the Poisson Newton iterations.

    Returns
    -------
    ExpertParams
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValidationError("weights must be nonnegative")
    total = w.sum()
    if not total > 0:
        raise ValidationError("weights must have a positive sum")
    if family == GAUSSIAN:
        Xw = X * w[:, None]
        beta, _ = _solve_normal(Xw.T @ X, Xw.T @ y, ridge)
        resid = y - X @ beta
        sigma2 = float(w @ resid ** 2 / total)
        return ExpertParams(GAUSSIAN, beta, max(sigma2, SIGMA2_FLOOR))
    if family == POISSON:
        return ExpertParams(POISSON, _poisson_newton(y, X, w, ridge, beta_init))
    raise ValidationError(f"unknown family {family!r}")


def _poisson_loglik(beta, y, X, w):
    eta = X @ beta
    return float(w @ (y * eta - np.exp(eta)))


def _poisson_newton(y, X, w, ridge, beta_init=None, max_iter=100, tol=1e-8):
    y = _check_counts(y)
    p = X.shape[1]
    if beta_init is None:
        beta = np.zeros(p)
        # start from the intercept-only fit when the first column is constant
        if p and np.allclose(X[:, 0], X[0, 0]) and X[0, 0] != 0:
            beta[0] = np.log((w @ y) / w.sum() + 0.1) / X[0, 0]
    else:
        beta = np.array(beta_init, dtype=float)
    ll = _poisson_loglik(beta, y, X, w)
    for _ in range(max_iter):
        mu = np.exp(X @ beta)
        grad = X.T @ (w * (y - mu))
        if np.linalg.norm(grad) < tol:
            return beta
        info = (X * (w * mu)[:, None]).T @ X
        step, _ = _solve_normal(info, grad, ridge)
        t = 1.0
        while True:
            cand = beta + t * step
            ll_new = _poisson_loglik(cand, y, X, w)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
            if t < 1e-10:
                raise ConvergenceError("poisson Newton step failed to improve the likelihood", beta)
        beta, ll = cand, ll_new
    mu = np.exp(X @ beta)
    if np.linalg.norm(X.T @ (w * (y - mu))) < tol:
        return beta
    raise ConvergenceError(f"poisson Newton did not converge in {max_iter} iterations", beta)
