"""Dirichlet layer: density, sampling and the two maximum-likelihood M-steps.

``mle_static`` fits a single ``alpha`` from averaged posterior log-proportions;
``mle_covariate`` fits ``gamma`` in ``alpha_ik = exp(w_i @ gamma_k)``.
"""

import numpy as np
from scipy.optimize import minimize
from scipy.special import digamma, gammaln, polygamma

from .core import ConvergenceError, DomainError, ValidationError

CLAMP = 1e-12


def trigamma(x):
    return polygamma(1, x)


def log_pdf(pi, alpha) -> float:
    pi = np.asarray(pi, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if pi.shape != alpha.shape:
        raise ValidationError("pi and alpha must have the same length")
    if np.any(alpha <= 0):
        raise DomainError("alpha must be positive")
    if np.any(pi <= 0) or abs(pi.sum() - 1) > 1e-10:
        raise DomainError("pi must lie strictly inside the simplex")
    return float(gammaln(alpha.sum()) - gammaln(alpha).sum() + (alpha - 1) @ np.log(pi))


def sample(alpha, rng, size=None) -> np.ndarray:
    """Draw from Dir(alpha) by normalizing independent gamma variates.

    Coordinates are clamped at 1e-12 and renormalized, so downstream logs are
    finite. ``size`` adds leading batch dimensions.
    """
    alpha = np.asarray(alpha, dtype=float)
    shape = alpha.shape if size is None else tuple(np.atleast_1d(size)) + alpha.shape
    g = rng.standard_gamma(np.broadcast_to(alpha, shape))
    return _normalize(g)


def _normalize(g):
    # all-zero gamma rows (tiny alpha) become uniform after clamping
    with np.errstate(invalid="ignore"):
        pi = g / g.sum(axis=-1, keepdims=True)
    pi = np.where(np.isfinite(pi), pi, 0.0)
    pi = np.maximum(pi, CLAMP)
    return pi / pi.sum(axis=-1, keepdims=True)


def mean(alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    return alpha / alpha.sum()


def expected_log(alpha) -> np.ndarray:
    """E[log pi_k] under Dir(alpha)."""
    alpha = np.asarray(alpha, dtype=float)
    return digamma(alpha) - digamma(alpha.sum())


def static_objective(alpha, logpi_bar, m) -> float:
    alpha = np.asarray(alpha, dtype=float)
    return float(m * (gammaln(alpha.sum()) - gammaln(alpha).sum() + alpha @ logpi_bar))


def mle_static(logpi_bar, m, alpha_init, tol=1e-8, max_iter=200, history=None) -> np.ndarray:
    """Maximize ``m logG(sum a) - m sum logG(a_k) + m sum a_k s_k`` over ``a > 0``.

    ``s = logpi_bar`` is the cluster average of the posterior log-proportions.
    Newton steps are taken in ``u = log(alpha)``; when the Newton direction is
    not an ascent direction, or fails to increase the objective after
    backtracking, a backtracking gradient step is taken instead. Convergence
    is declared when the per-cluster gradient in ``alpha`` has norm < ``tol``.

    If ``history`` is a list, the objective value of every accepted iterate is
    appended to it.
    """
    s = np.asarray(logpi_bar, dtype=float)
    K = s.size
    if K < 2:
        raise DomainError("Dirichlet parameters are unidentified for K < 2")
    if not np.all(np.isfinite(s)) or np.any(s >= 0):
        raise DomainError("average log-proportions must be finite and negative")
    u = np.log(np.asarray(alpha_init, dtype=float))

    def f(u):
        return static_objective(np.exp(u), s, m)

    fu = f(u)
    if history is not None:
        history.append(fu)
    for _ in range(max_iter):
        a = np.exp(u)
        g_a = digamma(a.sum()) - digamma(a) + s
        if np.linalg.norm(g_a) < tol:
            return a
        g_u = m * a * g_a
        H_a = m * (trigamma(a.sum()) - np.diag(trigamma(a)))
        H_u = a[:, None] * H_a * a[None, :] + np.diag(g_u)
        step = None
        try:
            newton = -np.linalg.solve(H_u, g_u)
            if newton @ g_u > 0:
                step = newton
        except np.linalg.LinAlgError:
            pass
        slack = 1e-13 * (1.0 + abs(fu))
        u_new, f_new = _backtrack(f, u, fu, step, slack) if step is not None else (None, None)
        if u_new is None:
            direction = g_u / max(np.linalg.norm(g_u), 1.0)
            u_new, f_new = _backtrack(f, u, fu, direction, slack)
        if u_new is None:
            # no representable ascent step left; accept if already near-stationary
            if np.linalg.norm(g_a) < 1e3 * tol:
                return a
            break
        u, fu = u_new, f_new
        if history is not None:
            history.append(fu)
    a = np.exp(u)
    if np.linalg.norm(digamma(a.sum()) - digamma(a) + s) < tol:
        return a
    raise ConvergenceError(f"Dirichlet MLE did not converge in {max_iter} iterations", a)


def _backtrack(f, u, fu, direction, slack=0.0, max_step=5.0):
    """Halve the step along ``direction`` until the objective does not drop.

    ``slack`` tolerates round-off-sized decreases, which matters close to the
    optimum where the objective is flat to machine precision.
    """
    t = min(1.0, max_step / max(np.abs(direction).max(), 1e-300))
    while t > 1e-12:
        cand = u + t * direction
        fc = f(cand)
        if np.isfinite(fc) and fc >= fu - slack:
            return cand, fc
        t *= 0.5
    return None, None


def q_gamma(gamma, W, logpi_star) -> float:
    """Expected complete-data Dirichlet log-likelihood as a function of ``gamma`` (K x q)."""
    A = np.exp(W @ np.asarray(gamma).T)
    return float(np.sum(gammaln(A.sum(axis=1))) - np.sum(gammaln(A)) + np.sum(A * logpi_star))


def q_gamma_grad(gamma, W, logpi_star) -> np.ndarray:
    A = np.exp(W @ np.asarray(gamma).T)
    inner = A * (digamma(A.sum(axis=1))[:, None] - digamma(A) + logpi_star)
    return inner.T @ W


def mle_covariate(gamma_init, W, logpi_star, tol=1e-6, max_iter=500) -> np.ndarray:
    """Maximize ``q_gamma`` over ``gamma`` by BFGS with the analytic gradient.

    Parameters
    ----------
    gamma_init : array, shape (K, q)
    W : array, shape (m, q)
        Cluster covariates; include a column of ones for an intercept.
    logpi_star : array, shape (m, K)
        Posterior expectations of ``log pi_ik``.
    """
    gamma_init = np.atleast_2d(np.asarray(gamma_init, dtype=float))
    W = np.asarray(W, dtype=float)
    logpi_star = np.asarray(logpi_star, dtype=float)
    K, q = gamma_init.shape
    if W.shape[1] != q or logpi_star.shape != (W.shape[0], K):
        raise ValidationError("inconsistent shapes for gamma, W and logpi_star")
    if K < 2:
        raise DomainError("Dirichlet parameters are unidentified for K < 2")

    def neg(theta):
        g = theta.reshape(K, q)
        with np.errstate(over="ignore"):
            val = q_gamma(g, W, logpi_star)
            grad = q_gamma_grad(g, W, logpi_star)
        if not np.isfinite(val):
            return np.inf, np.zeros_like(theta)
        return -val, -grad.ravel()

    theta = gamma_init.ravel()
    q0 = q_gamma(gamma_init, W, logpi_star)
    res = minimize(neg, theta, jac=True, method="BFGS",
                   options={"gtol": tol / 10, "maxiter": max_iter, "norm": 2})
    theta = res.x
    # BFGS can stop on line-search precision just short of the tolerance; polish with Newton
    for _ in range(20):
        _, g = neg(theta)
        if np.linalg.norm(g) < tol:
            break
        theta = _newton_polish(neg, theta, K, q, W, logpi_star)
    gamma = theta.reshape(K, q)
    gnorm = np.linalg.norm(q_gamma_grad(gamma, W, logpi_star))
    if gnorm >= tol or q_gamma(gamma, W, logpi_star) < q0:
        raise ConvergenceError(
            f"covariate Dirichlet MLE stopped with gradient norm {gnorm:.2e}", gamma)
    return gamma


def _q_gamma_hessian(gamma, W, logpi_star):
    A = np.exp(W @ gamma.T)
    m, K = A.shape
    q = W.shape[1]
    A0 = A.sum(axis=1)
    t0 = trigamma(A0)
    base = digamma(A0)[:, None] - digamma(A) + logpi_star
    Hs = np.zeros((K, q, K, q))
    for k in range(K):
        for l in range(K):
            c = A[:, k] * A[:, l] * t0
            if k == l:
                c = c + A[:, k] * base[:, k] - A[:, k] ** 2 * trigamma(A[:, k])
            Hs[k, :, l, :] = (W * c[:, None]).T @ W
    return Hs.reshape(K * q, K * q)


def _newton_polish(neg, theta, K, q, W, logpi_star):
    fval, g = neg(theta)
    H = -_q_gamma_hessian(theta.reshape(K, q), W, logpi_star)
    try:
        step = -np.linalg.solve(H, g)
    except np.linalg.LinAlgError:
        step = -g
    if step @ g >= 0:
        step = -g
    t = 1.0
    while t > 1e-10:
        cand = theta + t * step
        fc, _ = neg(cand)
        if fc <= fval:
            return cand
        t *= 0.5
    return theta


def cd_mean(gamma, w) -> np.ndarray:
    eta = np.asarray(gamma, dtype=float) @ np.asarray(w, dtype=float)
    e = np.exp(eta - eta.max())
    return e / e.sum()
