import numpy as np
import pytest
from scipy import stats

from latmix.core import (CovariateMixing, ExpertParams, FitResult, PosteriorSummaries, StaticMixing,
                         ValidationError)
from latmix.predict import (cluster_density, component_densities, default_grid, marginal_density,
                            marginal_weights)


def _fit(experts, mixing, pi_hat, family="gaussian"):
    pi_hat = np.atleast_2d(pi_hat)
    m, K = pi_hat.shape
    return FitResult(K=K, family=family, experts=experts, mixing=mixing,
                     summaries=PosteriorSummaries([], np.zeros((m, K)), pi_hat),
                     log_ml=np.zeros(m), aic=0.0, bic=0.0, n_params=0,
                     cluster_ids=[f"c{i}" for i in range(m)])


def test_degenerate_weights_select_one_expert(two_experts):
    fit = _fit(two_experts, StaticMixing([1.0, 1.0]), [[1.0, 0.0]])
    grid = np.linspace(-5, 5, 101)
    x = np.array([1.0, 0.3])
    expected = stats.norm.pdf(grid, x @ two_experts[0].beta, 1.0)
    np.testing.assert_allclose(cluster_density(fit, "c0", x, grid), expected, rtol=1e-13)


def test_marginal_weights():
    e = [ExpertParams("gaussian", [0.0], 1.0)] * 2
    np.testing.assert_allclose(marginal_weights(_fit(e, StaticMixing([5.0, 3.0]), [[0.5, 0.5]])),
                               [0.625, 0.375])
    cd = _fit(e, CovariateMixing(np.zeros((2, 2))), [[0.5, 0.5]])
    np.testing.assert_allclose(marginal_weights(cd, [1.0, 4.0]), [0.5, 0.5])
    with pytest.raises(ValidationError):
        marginal_density(cd, [1.0], np.zeros(3))


def test_density_integrates_to_one(rng):
    experts = [ExpertParams("gaussian", rng.normal(size=2), s2) for s2 in (0.3, 1.7, 0.8)]
    fit = _fit(experts, StaticMixing([1.0, 2.0, 0.5]), rng.dirichlet(np.ones(3), size=2))
    x = np.array([1.0, -0.4])
    means = np.array([x @ e.beta for e in experts])
    smax, smin = np.sqrt(1.7), np.sqrt(0.3)
    grid = np.arange(means.min() - 10 * smax, means.max() + 10 * smax, smin / 50)
    for cid in fit.cluster_ids:
        assert np.trapezoid(cluster_density(fit, cid, x, grid), grid) == pytest.approx(1.0, abs=1e-4)


def test_component_density_shape(two_experts):
    assert component_densities(two_experts, [1.0, 0.0], np.zeros(7)).shape == (7, 2)


def test_default_grid_covers_components(two_experts):
    fit = _fit(two_experts, StaticMixing([1.0, 1.0]), [[0.5, 0.5]])
    grid = default_grid(fit, np.array([1.0, 2.0]))
    assert grid.size == 512
    assert grid[0] == pytest.approx(-1.0 - 6.0) and grid[-1] == pytest.approx(1.0 + 6.0)


def test_poisson_grid_is_integer():
    fit = _fit([ExpertParams("poisson", [np.log(4.0)])] * 2, StaticMixing([1.0, 1.0]), [[0.5, 0.5]],
               family="poisson")
    grid = default_grid(fit, np.array([1.0]))
    assert grid[0] == 0 and np.all(np.diff(grid) == 1) and grid[-1] >= 16
