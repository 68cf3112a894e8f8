import numpy as np
import pytest

from latmix import mcem
from latmix.core import Cluster, McemConfig, ValidationError, validate_dataset
from latmix.predict import cluster_density, marginal_density

from .conftest import line_dataset, two_line_dataset


def test_constant_sequence_stops_at_first_check():
    cfg = McemConfig()
    trace = []
    stop = None
    for t in range(1, 100):
        trace.append(np.array([1.0, -2.0, 0.5]))
        if mcem.batch_mean_converged(trace, cfg.H, cfg.d, cfg.epsilon, cfg.delta):
            stop = t
            break
    assert stop == 35


def test_drifting_sequence_does_not_stop():
    trace = [np.array([float(t)]) for t in range(1, 200)]
    assert not mcem.batch_mean_converged(trace, 30, 5, 1e-3, 1e-3)


def test_flatten_roundtrip(two_experts):
    from latmix.core import CovariateMixing
    mix = CovariateMixing([[0.1, 0.2], [0.3, -0.4]])
    theta = mcem.flatten(two_experts, mix)
    experts, mix2 = mcem.unflatten(theta, "gaussian", 2, 2, "cd", 2)
    np.testing.assert_array_equal(mcem.flatten(experts, mix2), theta)


def test_residual_start_separates_lines(rng):
    clusters = []
    for i in range(10):
        x = rng.normal(size=40)
        z = rng.random(40) < 0.5
        y = np.where(z, 10 + x, -10 - x) + 0.1 * rng.normal(size=40)
        clusters.append(Cluster(f"c{i}", y, np.column_stack([np.ones(40), x])))
    ds = validate_dataset(clusters)
    experts, mixing = mcem.initialize(ds, 2, "gaussian", rng)
    assert np.sign(experts[0].beta[1]) != np.sign(experts[1].beta[1])
    np.testing.assert_array_equal(mixing.alpha, [1.0, 1.0])


def test_random_start_assigns_whole_clusters(rng):
    ds = line_dataset(rng, m=6, n=5)
    experts, mixing = mcem.initialize(ds, 3, "gaussian", rng, kind="random", mixing_kind="cd")
    assert len(experts) == 3
    assert mixing.kind == "cd"


def test_fit_rejects_bad_arguments(rng, fast_config):
    ds = line_dataset(rng, m=4, n=5)
    with pytest.raises(ValidationError):
        mcem.fit(ds, 1, config=fast_config)
    with pytest.raises(ValidationError):
        mcem.fit(ds, 2, mixing_kind="cd", config=fast_config)


@pytest.fixture(scope="module")
def scenario_fit():
    ds = two_line_dataset(np.random.default_rng(11), m=30, n=30, empty=1)
    cfg = McemConfig(L=200, burn_in=50, H=15, d=5, max_iter=120, n_starts=3, ml_draws=1000, seed=4)
    return ds, cfg, mcem.fit(ds, 2, config=cfg)


def test_fit_recovers_two_lines(scenario_fit):
    _, _, fit = scenario_fit
    betas = np.array([e.beta for e in fit.experts])
    np.testing.assert_allclose(betas, [[-1.0, 1.0], [1.0, -1.0]], atol=0.2)
    mean_alpha = fit.mixing.alpha / fit.mixing.alpha.sum()
    assert mean_alpha[0] >= mean_alpha[1]
    np.testing.assert_allclose(mean_alpha, [0.625, 0.375], atol=0.1)


def test_fit_is_deterministic(scenario_fit):
    ds, cfg, fit = scenario_fit
    again = mcem.fit(ds, 2, config=cfg)
    np.testing.assert_array_equal(fit.trace, again.trace)
    np.testing.assert_array_equal(fit.log_ml, again.log_ml)
    np.testing.assert_array_equal(fit.summaries.pi_hat, again.summaries.pi_hat)


def test_estimate_is_average_of_last_iterates(scenario_fit):
    _, cfg, fit = scenario_fit
    theta = mcem.flatten(fit.experts, fit.mixing)
    np.testing.assert_allclose(theta, fit.trace[-cfg.H:].mean(axis=0), rtol=1e-12)


def test_fit_summaries_and_criteria(scenario_fit):
    ds, _, fit = scenario_fit
    assert fit.n_params == 2 * 3 + 2
    assert fit.aic == pytest.approx(-2 * fit.total_log_ml + 2 * 8)
    assert fit.bic == pytest.approx(-2 * fit.total_log_ml + 8 * np.log(ds.N))
    np.testing.assert_allclose(fit.summaries.pi_hat[-1], fit.mixing.alpha / fit.mixing.alpha.sum(),
                               rtol=1e-14)


def test_one_line_truth_is_recovered_in_density(rng):
    ds = line_dataset(rng, m=20, n=25, beta=(0.5, 2.0), sigma=0.5)
    cfg = McemConfig(L=100, burn_in=20, H=10, d=3, max_iter=60, n_starts=2, ml_draws=500, seed=9)
    fit = mcem.fit(ds, 2, config=cfg)
    grid = np.linspace(-6, 8, 3001)
    x = np.array([1.0, 0.7])
    truth = np.exp(-0.5 * (grid - x @ [0.5, 2.0]) ** 2 / 0.25) / np.sqrt(2 * np.pi * 0.25)
    tv = 0.5 * np.trapezoid(np.abs(marginal_density(fit, x, grid) - truth), grid)
    assert tv < 0.05


def test_fit_single(rng):
    ds = line_dataset(rng, m=5, n=10)
    fit = mcem.fit_single(ds)
    assert fit.K == 1 and fit.n_params == 3
    y, X, _ = ds.pooled()
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    np.testing.assert_allclose(fit.experts[0].beta, beta, atol=1e-10)


def test_every_start_to_convergence_without_pilot(rng):
    ds = two_line_dataset(rng, m=10, n=20)
    cfg = McemConfig(L=50, burn_in=10, H=5, d=2, max_iter=30, n_starts=2, ml_draws=200, seed=1,
                     pilot_iter=0)
    fit = mcem.fit(ds, 2, config=cfg)
    assert fit.start in (0, 1)
    assert len(fit.trace) == fit.iterations


def test_permuted_start_gives_the_same_density(scenario_fit):
    ds, cfg, _ = scenario_fit
    experts, mixing = mcem.initialize(ds, 2, "gaussian", np.random.default_rng(0))
    mixing = type(mixing)([2.0, 1.0])
    a = mcem.fit(ds, 2, config=cfg, init=(experts, mixing))
    b = mcem.fit(ds, 2, config=cfg, init=(experts[::-1], mixing.permuted([1, 0])))
    grid = np.linspace(-6, 6, 301)
    x = np.array([1.0, 0.4])
    for cid in ds.ids:
        np.testing.assert_allclose(cluster_density(a, cid, x, grid), cluster_density(b, cid, x, grid),
                                   atol=1e-10)


def test_marginal_likelihood_improves_over_the_start(scenario_fit):
    ds, cfg, fit = scenario_fit
    experts, mixing = mcem.initialize(ds, 2, "gaussian", np.random.default_rng(0))
    start = mcem.per_cluster_log_ml(ds, experts, mixing, 2000, 0).sum()
    assert fit.total_log_ml > start
