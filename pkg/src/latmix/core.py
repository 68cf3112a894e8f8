"""Domain types shared across the package.

A dataset is a collection of clusters; each cluster carries responses ``y``,
an ``n_i x p`` design matrix ``X`` and (optionally) a ``q``-vector ``w`` of
cluster-level covariates. Fitted models are described by a list of
:class:`ExpertParams` (the shared latent regressions) and a mixing model,
which is either a single Dirichlet parameter ``alpha`` or a coefficient
matrix ``gamma`` with ``alpha_ik = exp(w_i @ gamma_k)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

GAUSSIAN = "gaussian"
POISSON = "poisson"
FAMILIES = (GAUSSIAN, POISSON)

STATIC = "static"
COVARIATE = "cd"

CRITERIA = ("aic", "bic")


class LatmixError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(LatmixError, ValueError):
    """Input data or arguments violate a documented contract."""


class DimensionError(ValidationError):
    pass


class DomainError(ValidationError):
    """A value lies outside the support of a density or operation."""


class NumericalError(LatmixError, ArithmeticError):
    pass


class UnderflowError(NumericalError):
    pass


class RankDeficiencyError(NumericalError):
    pass


class ConvergenceError(LatmixError):
    """An iterative routine hit its iteration cap.

    ``last`` carries the final iterate so callers can inspect or reuse it.
    """

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class FitError(NumericalError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Cluster:
    id: str
    y: np.ndarray
    X: np.ndarray
    w: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class ClusteredDataset:
    clusters: tuple
    p: int
    q: int = 0

    @property
    def m(self) -> int:
        return len(self.clusters)

    @property
    def N(self) -> int:
        return int(sum(c.n for c in self.clusters))

    @property
    def ids(self) -> list:
        return [c.id for c in self.clusters]

    @property
    def sizes(self) -> np.ndarray:
        return np.array([c.n for c in self.clusters], dtype=int)

    def index(self, cluster_id) -> int:
        for i, c in enumerate(self.clusters):
            if c.id == cluster_id:
                return i
        raise KeyError(f"unknown cluster id {cluster_id!r}")

    def W(self) -> np.ndarray:
        """Stack cluster-level covariates into an ``m x q`` matrix."""
        if self.q == 0:
            return np.zeros((self.m, 0))
        return np.vstack([c.w for c in self.clusters])

    def pooled(self):
        """Return ``(y, X, cluster_index)`` over all observations."""
        ys = [c.y for c in self.clusters]
        Xs = [c.X for c in self.clusters]
        idx = np.repeat(np.arange(self.m), self.sizes)
        if self.N == 0:
            return np.zeros(0), np.zeros((0, self.p)), idx
        return np.concatenate(ys), np.vstack(Xs), idx


def validate_dataset(raw: Union[ClusteredDataset, Sequence[Cluster]]) -> ClusteredDataset:
    """Check shapes and finiteness, infer ``p`` and ``q``, and freeze arrays.

    Accepts an existing :class:`ClusteredDataset` or a plain sequence of
    clusters. Clusters with no observations are allowed; their ``X`` may be
    given as an empty array of any shape.
    """
    clusters = list(raw.clusters if isinstance(raw, ClusteredDataset) else raw)
    if not clusters:
        raise DimensionError("dataset has no clusters")

    p = None
    for c in clusters:
        X = np.asarray(c.X, dtype=float)
        if X.ndim == 2 and X.shape[0] > 0:
            if p is None:
                p = X.shape[1]
            elif X.shape[1] != p:
                raise DimensionError(
                    f"cluster {c.id!r}: covariate rows have length {X.shape[1]}, expected {p}")
    if p is None:
        if isinstance(raw, ClusteredDataset):
            p = raw.p
        else:
            raise DimensionError("cannot infer covariate dimension: every cluster is empty")

    q = None
    for c in clusters:
        if c.w is not None:
            w = np.atleast_1d(np.asarray(c.w, dtype=float))
            if q is None:
                q = len(w)
            elif len(w) != q:
                raise DimensionError(
                    f"cluster {c.id!r}: cluster covariate has length {len(w)}, expected {q}")
    q = q or 0

    seen = set()
    out = []
    for c in clusters:
        cid = str(c.id)
        if cid in seen:
            raise ValidationError(f"duplicate cluster id {cid!r}")
        seen.add(cid)
        y = np.atleast_1d(np.asarray(c.y, dtype=float))
        X = np.asarray(c.X, dtype=float)
        if y.size == 0:
            X = np.zeros((0, p))
        if X.ndim == 1 and y.size == 1:
            X = X.reshape(1, -1)
        if X.ndim != 2 or X.shape[1] != p:
            raise DimensionError(f"cluster {cid!r}: X must be n_i x {p}, got shape {X.shape}")
        if X.shape[0] != y.size:
            raise DimensionError(
                f"cluster {cid!r}: X has {X.shape[0]} rows but y has {y.size} entries")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise ValidationError(f"cluster {cid!r}: non-finite response or covariate value")
        w = None
        if q:
            if c.w is None:
                raise DimensionError(f"cluster {cid!r}: missing cluster-level covariates")
            w = np.atleast_1d(np.asarray(c.w, dtype=float))
            if not np.all(np.isfinite(w)):
                raise ValidationError(f"cluster {cid!r}: non-finite cluster covariate")
            w = _frozen(w)
        out.append(Cluster(cid, _frozen(y), _frozen(X), w))
    return ClusteredDataset(tuple(out), int(p), int(q))


def dataset_from_arrays(cluster_ids, y, X, W=None) -> ClusteredDataset:
    """Group long-format arrays by cluster id (first-appearance order).

    ``W`` holds one row per observation and must be constant within a cluster.
    """
    cluster_ids = np.asarray(cluster_ids).astype(str)
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    _, first = np.unique(cluster_ids, return_index=True)
    order = cluster_ids[np.sort(first)]
    clusters = []
    for cid in map(str, order):
        rows = cluster_ids == cid
        w = None
        if W is not None:
            Wc = np.asarray(W, dtype=float)[rows]
            if Wc.ndim == 1:
                Wc = Wc[:, None]
            bad = np.flatnonzero(np.any(Wc != Wc[0], axis=0))
            if bad.size:
                raise ValidationError(
                    f"cluster {cid!r}: cluster-level column {int(bad[0])} varies within the cluster")
            w = Wc[0]
        clusters.append(Cluster(cid, y[rows], X[rows], w))
    return validate_dataset(clusters)


@dataclass(frozen=True)
class ExpertParams:
    family: str
    beta: np.ndarray
    sigma2: Optional[float] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown family {self.family!r}")
        object.__setattr__(self, "beta", _frozen(self.beta))
        if not np.all(np.isfinite(self.beta)):
            raise ValidationError("expert coefficients must be finite")
        if self.family == GAUSSIAN:
            if self.sigma2 is None or not self.sigma2 > 0:
                raise ValidationError("gaussian expert needs a positive sigma2")
            object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def dim(self) -> int:
        """Number of free parameters in this expert."""
        return len(self.beta) + (1 if self.family == GAUSSIAN else 0)

    def flat(self) -> np.ndarray:
        if self.family == GAUSSIAN:
            return np.append(self.beta, self.sigma2)
        return np.array(self.beta)


@dataclass(frozen=True)
class StaticMixing:
    alpha: np.ndarray
    kind = STATIC

    def __post_init__(self):
        object.__setattr__(self, "alpha", _frozen(self.alpha))
        if not np.all(self.alpha > 0):
            raise ValidationError("Dirichlet parameters must be positive")

    @property
    def K(self) -> int:
        return len(self.alpha)

    def alpha_for(self, w=None) -> np.ndarray:
        return np.array(self.alpha)

    def flat(self) -> np.ndarray:
        return np.array(self.alpha)

    def permuted(self, perm):
        return StaticMixing(self.alpha[perm])


@dataclass(frozen=True)
class CovariateMixing:
    """Dirichlet parameters driven by cluster covariates, ``alpha_ik = exp(w_i @ gamma[k])``."""

    gamma: np.ndarray
    kind = COVARIATE

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        object.__setattr__(self, "gamma", _frozen(g))

    @property
    def K(self) -> int:
        return self.gamma.shape[0]

    @property
    def q(self) -> int:
        return self.gamma.shape[1]

    def alpha_for(self, w=None) -> np.ndarray:
        if w is None:
            raise ValidationError("covariate-dependent mixing requires cluster covariates w")
        return np.exp(self.gamma @ np.asarray(w, dtype=float))

    def flat(self) -> np.ndarray:
        return self.gamma.ravel()

    def permuted(self, perm):
        return CovariateMixing(self.gamma[perm])


MixingModel = Union[StaticMixing, CovariateMixing]


@dataclass
class PosteriorSummaries:
    """Monte Carlo posterior expectations from the Gibbs E-step, one entry per cluster."""

    z_star: list
    logpi_star: np.ndarray
    pi_hat: np.ndarray

    def permuted(self, perm):
        return PosteriorSummaries(
            [z[:, perm] for z in self.z_star], self.logpi_star[:, perm], self.pi_hat[:, perm])


@dataclass
class McemConfig:
    """Tuning constants for the MCEM driver.

    ``L`` = 500 Gibbs draws, a batch size ``H`` = 30 with lag ``d`` = 5 and
    ``epsilon`` = ``delta`` = 1e-3 are the standard defaults. ``n_starts`` and ``ml_draws`` control
    the multi-start selection. With several starts, each one first runs
    ``pilot_iter`` iterations (``H + d`` when None); only the start with the
    largest Monte Carlo marginal likelihood at that point is run to
    convergence. ``pilot_iter=0`` runs every start to convergence instead.
    """

    L: int = 500
    burn_in: int = 100
    H: int = 30
    d: int = 5
    epsilon: float = 1e-3
    delta: float = 1e-3
    max_iter: int = 500
    n_starts: int = 5
    ml_draws: int = 10_000
    seed: int = 0
    pilot_iter: int | None = None

    def __post_init__(self):
        for name in ("L", "burn_in", "H", "d", "max_iter", "n_starts", "ml_draws"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.pilot_iter is not None and self.pilot_iter < 0:
            raise ValidationError("pilot_iter must be >= 0")
        if not (self.epsilon > 0 and self.delta > 0):
            raise ValidationError("epsilon and delta must be positive")


@dataclass
class FitResult:
    K: int
    family: str
    experts: list
    mixing: MixingModel
    summaries: PosteriorSummaries
    log_ml: np.ndarray
    aic: float
    bic: float
    n_params: int
    cluster_ids: list
    trace: np.ndarray = field(repr=False, default=None)
    converged: bool = True
    iterations: int = 0
    start: int = 0

    @property
    def pi_hat(self) -> np.ndarray:
        return self.summaries.pi_hat

    @property
    def total_log_ml(self) -> float:
        return float(np.sum(self.log_ml))

    def cluster_index(self, cluster_id) -> int:
        try:
            return self.cluster_ids.index(str(cluster_id))
        except ValueError:
            raise KeyError(f"unknown cluster id {cluster_id!r}") from None
