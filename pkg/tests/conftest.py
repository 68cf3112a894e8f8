import numpy as np
import pytest

from latmix.core import Cluster, ExpertParams, McemConfig, validate_dataset


def line_dataset(rng, m=20, n=30, beta=(0.5, 2.0), sigma=0.3, empty=0):
    """Clusters drawn from a single regression line, plus ``empty`` clusters with no data."""
    clusters = []
    for i in range(m):
        x = rng.normal(size=n)
        X = np.column_stack([np.ones(n), x])
        clusters.append(Cluster(f"c{i:02d}", X @ np.asarray(beta) + sigma * rng.normal(size=n), X))
    for i in range(empty):
        clusters.append(Cluster(f"e{i:02d}", np.zeros(0), np.zeros((0, 2))))
    return validate_dataset(clusters)


def two_line_dataset(rng, m=30, n=30, a=(5.0, 3.0), empty=0):
    """Scenario-I-like data: lines -1 + x and 1 - x with Beta-distributed weights."""
    clusters = []
    for i in range(m):
        pi = rng.beta(*a)
        x = rng.normal(size=n)
        z = rng.random(n) < pi
        y = np.where(z, -1 + x, 1 - x) + rng.normal(size=n)
        clusters.append(Cluster(f"c{i:02d}", y, np.column_stack([np.ones(n), x])))
    for i in range(empty):
        clusters.append(Cluster(f"e{i:02d}", np.zeros(0), np.zeros((0, 2))))
    return validate_dataset(clusters)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def fast_config():
    return McemConfig(L=100, burn_in=20, H=10, d=3, max_iter=60, n_starts=2, ml_draws=500, seed=3)


@pytest.fixture
def two_experts():
    return [ExpertParams("gaussian", [-1.0, 1.0], 1.0), ExpertParams("gaussian", [1.0, -1.0], 1.0)]
