"""Monte Carlo EM for the latent mixture model.

Each iteration runs the Gibbs E-step on every cluster, refits every expert by
weighted maximum likelihood with the posterior label probabilities as weights,
and refits the Dirichlet layer from the posterior log-proportions. Iteration
stops when the batch mean of the last ``H`` parameter vectors moves by less
than ``epsilon`` (relative) over ``d`` iterations.
"""

import numpy as np

from . import _rng, dirichlet
from .core import (COVARIATE, GAUSSIAN, STATIC, ConvergenceError, CovariateMixing, ExpertParams,
                   FitError, FitResult, LatmixError, McemConfig, PosteriorSummaries,
                   StaticMixing, ValidationError)
from .expert import log_density_matrix, weighted_mle
from .gibbs import cluster_alphas, posterior_summaries
from .selection import criteria, log_ml_mc, n_params

M_STEP_RETRIES = 3


def batch_mean_converged(trace, H, d, epsilon, delta) -> bool:
    """Batch-mean stopping rule on a sequence of flattened parameter vectors.

    ``trace[t-1]`` is the iterate after ``t`` EM steps. The rule needs ``H + d``
    iterates before it can fire.
    """
    t = len(trace)
    if t < H + d:
        return False
    arr = np.asarray(trace[t - H - d:])
    recent = arr[d:].mean(axis=0)
    lagged = arr[:H].mean(axis=0)
    rel = np.linalg.norm(recent - lagged) / (np.linalg.norm(lagged) + delta)
    return bool(rel < epsilon)


def flatten(experts, mixing) -> np.ndarray:
    return np.concatenate([e.flat() for e in experts] + [mixing.flat()])


def unflatten(theta, family, K, p, mixing_kind, q=0):
    dim = p + (1 if family == GAUSSIAN else 0)
    experts = []
    for k in range(K):
        block = theta[k * dim:(k + 1) * dim]
        if family == GAUSSIAN:
            experts.append(ExpertParams(family, block[:p], block[p]))
        else:
            experts.append(ExpertParams(family, block))
    rest = theta[K * dim:]
    if mixing_kind == COVARIATE:
        return experts, CovariateMixing(rest.reshape(K, q))
    return experts, StaticMixing(rest)


def _lex_order(experts):
    keys = np.array([e.flat() for e in experts])
    return np.lexsort(keys.T[::-1])


def initialize(dataset, K, family, rng, kind="residual", mixing_kind=STATIC):
    """Starting experts and mixing model.

    ``kind="residual"`` fits one pooled expert and splits observations into
    ``K`` groups by quantiles of its residuals. ``kind="random"`` assigns whole
    clusters to groups at random (observations, when there are fewer clusters
    than groups). Each group then gets its own weighted fit. The Dirichlet
    layer starts at ``alpha = 1`` (or ``gamma = 0``).
    """
    y, X, idx = dataset.pooled()
    N = len(y)
    if N == 0:
        raise ValidationError("cannot initialize on a dataset without observations")
    groups = np.empty(N, dtype=int)
    if kind == "residual":
        pooled = weighted_mle(family, y, X, np.ones(N), ridge=True)
        fitted = X @ pooled.beta
        resid = y - (fitted if family == GAUSSIAN else np.exp(fitted))
        ranks = np.argsort(np.argsort(resid, kind="stable"), kind="stable")
        groups = ranks * K // N
    elif kind == "random":
        occupied = np.flatnonzero(dataset.sizes > 0)
        if len(occupied) >= K:
            cluster_group = np.full(dataset.m, -1)
            for g, part in enumerate(np.array_split(rng.permutation(occupied), K)):
                cluster_group[part] = g
            groups = cluster_group[idx]
        else:
            for g, part in enumerate(np.array_split(rng.permutation(N), K)):
                groups[part] = g
    else:
        raise ValidationError(f"unknown initialization {kind!r}")

    experts = []
    for g in range(K):
        w = (groups == g).astype(float)
        experts.append(weighted_mle(family, y, X, w, ridge=True))
    if mixing_kind == COVARIATE:
        mixing = CovariateMixing(np.zeros((K, dataset.q)))
    else:
        mixing = StaticMixing(np.ones(K))
    return experts, mixing


def m_step(dataset, summaries, experts, mixing):
    """One M-step given posterior summaries; returns new ``(experts, mixing)``."""
    y, X, _ = dataset.pooled()
    Z = np.vstack(summaries.z_star)
    new_experts = [
        weighted_mle(e.family, y, X, Z[:, k], ridge=True, beta_init=e.beta)
        for k, e in enumerate(experts)
    ]
    if mixing.kind == COVARIATE:
        gamma = dirichlet.mle_covariate(mixing.gamma, dataset.W(), summaries.logpi_star)
        return new_experts, CovariateMixing(gamma)
    alpha = dirichlet.mle_static(summaries.logpi_star.mean(axis=0), dataset.m, mixing.alpha)
    return new_experts, StaticMixing(alpha)


def per_cluster_log_ml(dataset, experts, mixing, B, seed) -> np.ndarray:
    alphas = cluster_alphas(dataset, mixing)
    return np.array([
        log_ml_mc(c, experts, alphas[i], B, _rng.stream(seed, _rng.cluster_key(c.id)))
        for i, c in enumerate(dataset.clusters)
    ])


class _Chain:
    """State of one MCEM run, so that a run can be paused and resumed."""

    def __init__(self, experts, mixing, root):
        self.experts, self.mixing, self.root = experts, mixing, root
        self.trace = []
        self.converged = False

    def advance(self, dataset, config, until):
        """Iterate until ``until`` iterations in total, convergence, or failure."""
        while len(self.trace) < until and not self.converged:
            t = len(self.trace) + 1
            failure = None
            for attempt in range(M_STEP_RETRIES + 1):
                summ = posterior_summaries(dataset, self.experts, self.mixing, config,
                                           _rng.child(self.root, "estep", t, attempt))
                try:
                    self.experts, self.mixing = m_step(dataset, summ, self.experts, self.mixing)
                    break
                except (LatmixError, np.linalg.LinAlgError, FloatingPointError) as exc:
                    failure = exc
            else:
                raise FitError(f"M-step failed at iteration {t} after {M_STEP_RETRIES} retries: "
                               f"{failure}", trace=np.array(self.trace))
            self.trace.append(flatten(self.experts, self.mixing))
            self.converged = batch_mean_converged(self.trace, config.H, config.d,
                                                  config.epsilon, config.delta)
        return self

    def estimate(self, H):
        """Average of the last ``H`` iterates (the last iterate for shorter runs)."""
        if len(self.trace) >= H:
            return np.mean(self.trace[-H:], axis=0)
        return self.trace[-1]


def _run_chain(dataset, experts, mixing, config, root):
    """MCEM iterations from one starting point. Returns ``(theta_hat, trace, converged)``."""
    chain = _Chain(experts, mixing, root).advance(dataset, config, config.max_iter)
    return chain.estimate(config.H), np.array(chain.trace), chain.converged


def _canonical_order(experts, mixing, dataset):
    if mixing.kind == COVARIATE:
        means = np.mean([dirichlet.cd_mean(mixing.gamma, c.w) for c in dataset.clusters], axis=0)
    else:
        means = dirichlet.mean(mixing.alpha)
    keys = np.array([e.flat() for e in experts])
    return np.lexsort(tuple(keys.T[::-1]) + (-means,))


def fit(dataset, K, family=GAUSSIAN, mixing_kind=STATIC, config=None, init=None, seed_key=()):
    """Fit the latent mixture model with ``K >= 2`` experts by MCEM.

    Parameters
    ----------
    dataset : ClusteredDataset
    K : int
    family : {"gaussian", "poisson"}
    mixing_kind : {"static", "cd"}
        ``"cd"`` ties the Dirichlet parameters to the cluster covariates ``w``.
    config : McemConfig
    init : tuple (experts, mixing), optional
        Single starting point; by default ``config.n_starts`` starts are run
        (one residual-sliced, the rest random) for ``config.pilot_iter``
        iterations, and the one with the largest Monte Carlo marginal
        likelihood is continued to convergence.
    seed_key : tuple
        Extra keys appended to ``config.seed`` to name this fit's stream.

    Returns
    -------
    FitResult
    """
    config = config or McemConfig()
    if K < 2:
        raise ValidationError("fit needs K >= 2; use fit_single for one expert")
    if mixing_kind == COVARIATE and dataset.q < 1:
        raise ValidationError("covariate-dependent mixing needs cluster covariates (q >= 1)")
    root = _rng.child(config.seed, "fit", *seed_key)

    if init is not None:
        starts = [(0, list(init[0]), init[1])]
    else:
        starts = []
        for s in range(config.n_starts):
            kind = "residual" if s == 0 else "random"
            rng = _rng.stream(root, "start", s, "init")
            starts.append((s, *initialize(dataset, K, family, rng, kind, mixing_kind)))

    pilot = config.H + config.d if config.pilot_iter is None else config.pilot_iter
    if len(starts) == 1 or pilot == 0:
        pilot = config.max_iter

    def score(chain, s):
        experts_hat, mixing_hat = unflatten(chain.estimate(config.H), family, K, dataset.p,
                                            mixing_kind, dataset.q)
        log_ml = per_cluster_log_ml(dataset, experts_hat, mixing_hat, config.ml_draws,
                                    _rng.child(root, "start", s, "ml", len(chain.trace)))
        return float(log_ml.sum()), experts_hat, mixing_hat, log_ml

    ranked, errors = [], []
    for s, experts, mixing in starts:
        if len(experts) != K or mixing.K != K:
            raise ValidationError("initial parameters do not have K components")
        order = _lex_order(experts)
        experts = [experts[k] for k in order]
        mixing = mixing.permuted(order)
        chain = _Chain(experts, mixing, _rng.child(root, "start", s))
        try:
            chain.advance(dataset, config, pilot)
        except FitError as exc:
            errors.append(exc)
            continue
        ranked.append((score(chain, s), s, chain))
    if not ranked:
        raise FitError(f"all {len(starts)} starts failed: {errors[-1]}",
                       trace=getattr(errors[-1], "trace", None))

    # screened starts: continue only the leader, falling back to the next on failure
    ranked.sort(key=lambda r: (-r[0][0], r[1]))
    best = None
    for scored, s, chain in ranked:
        if not chain.converged and len(chain.trace) < config.max_iter:
            try:
                chain.advance(dataset, config, config.max_iter)
            except FitError as exc:
                errors.append(exc)
                continue
            scored = score(chain, s)
        total, experts_hat, mixing_hat, log_ml = scored
        best = (total, s, experts_hat, mixing_hat, log_ml, np.array(chain.trace), chain.converged)
        break
    if best is None:
        raise FitError(f"all {len(starts)} starts failed: {errors[-1]}",
                       trace=getattr(errors[-1], "trace", None))

    _, s, experts, mixing, log_ml, trace, converged = best
    summaries = posterior_summaries(dataset, experts, mixing, config,
                                    _rng.child(root, "start", s, "final"))
    order = _canonical_order(experts, mixing, dataset)
    experts = [experts[k] for k in order]
    mixing = mixing.permuted(order)
    summaries = summaries.permuted(order)
    trace = _permute_trace(trace, order, experts[0].dim, mixing)

    k_params = n_params(K, experts[0].dim, mixing.kind, dataset.q)
    aic, bic = criteria(float(log_ml.sum()), k_params, dataset.N)
    return FitResult(K=K, family=family, experts=experts, mixing=mixing, summaries=summaries,
                     log_ml=log_ml, aic=aic, bic=bic, n_params=k_params,
                     cluster_ids=dataset.ids, trace=trace, converged=converged,
                     iterations=len(trace), start=s)


def _permute_trace(trace, order, dim, mixing):
    K = len(order)
    cols = [np.arange(k * dim, (k + 1) * dim) for k in order]
    width = mixing.flat().size // K
    cols += [K * dim + np.arange(k * width, (k + 1) * width) for k in order]
    return trace[:, np.concatenate(cols)]


def fit_single(dataset, family=GAUSSIAN, mixing_kind=STATIC):
    """The ``K = 1`` model: one expert fitted to the pooled data, no Dirichlet layer."""
    y, X, _ = dataset.pooled()
    expert = weighted_mle(family, y, X, np.ones(len(y)), ridge=True)
    log_ml = np.array([
        float(log_density_matrix([expert], c.y, c.X).sum()) for c in dataset.clusters
    ])
    if mixing_kind == COVARIATE:
        mixing = CovariateMixing(np.zeros((1, dataset.q)))
    else:
        mixing = StaticMixing(np.ones(1))
    summaries = PosteriorSummaries([np.ones((c.n, 1)) for c in dataset.clusters],
                                   np.zeros((dataset.m, 1)), np.ones((dataset.m, 1)))
    k_params = n_params(1, expert.dim)
    aic, bic = criteria(float(log_ml.sum()), k_params, dataset.N)
    return FitResult(K=1, family=family, experts=[expert], mixing=mixing, summaries=summaries,
                     log_ml=log_ml, aic=aic, bic=bic, n_params=k_params,
                     cluster_ids=dataset.ids, trace=np.array([expert.flat()]),
                     converged=True, iterations=1)
