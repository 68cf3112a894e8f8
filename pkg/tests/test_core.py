import numpy as np
import pytest

from latmix.core import (Cluster, CovariateMixing, DimensionError, ExpertParams, McemConfig,
                         StaticMixing, ValidationError, dataset_from_arrays, validate_dataset)


def test_well_formed_single_cluster_is_accepted():
    ds = validate_dataset([Cluster("a", [1.0, 2.0, 3.0], np.ones((3, 2)))])
    assert (ds.m, ds.p, ds.q, ds.N) == (1, 2, 0, 3)


def test_row_length_mismatch_is_a_dimension_error():
    with pytest.raises(DimensionError, match="'b'"):
        validate_dataset([Cluster("a", [1.0], np.ones((1, 2))), Cluster("b", [1.0], np.ones((1, 3)))])


def test_empty_cluster_without_w_is_accepted():
    ds = validate_dataset([Cluster("a", [1.0, 2.0], np.ones((2, 2))), Cluster("b", [], np.zeros((0, 2)))])
    assert ds.sizes.tolist() == [2, 0]
    assert ds.N == 2


def test_arrays_are_frozen():
    ds = validate_dataset([Cluster("a", [1.0, 2.0], np.ones((2, 1)))])
    with pytest.raises(ValueError):
        ds.clusters[0].y[0] = 5.0


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_non_finite_values_rejected(bad):
    with pytest.raises(ValidationError):
        validate_dataset([Cluster("a", [1.0, bad], np.ones((2, 1)))])


def test_duplicate_ids_rejected():
    with pytest.raises(ValidationError, match="duplicate"):
        validate_dataset([Cluster("a", [1.0], np.ones((1, 1))), Cluster("a", [2.0], np.ones((1, 1)))])


def test_missing_w_when_others_have_it():
    with pytest.raises(DimensionError):
        validate_dataset([Cluster("a", [1.0], np.ones((1, 1)), [1.0, 0.0]),
                          Cluster("b", [1.0], np.ones((1, 1)))])


def test_from_arrays_groups_in_first_appearance_order():
    ds = dataset_from_arrays(["b", "a", "b"], [1.0, 2.0, 3.0], [[1.0], [2.0], [3.0]])
    assert ds.ids == ["b", "a"]
    np.testing.assert_array_equal(ds.clusters[0].y, [1.0, 3.0])


def test_from_arrays_rejects_varying_cluster_covariate():
    with pytest.raises(ValidationError, match=r"cluster 'a'.*column 1"):
        dataset_from_arrays(["a", "a"], [1.0, 2.0], [[1.0], [1.0]], W=[[1.0, 0.0], [1.0, 1.0]])


def test_pooled_roundtrip(rng):
    ds = dataset_from_arrays(np.repeat(["x", "y"], 3), rng.normal(size=6), rng.normal(size=(6, 2)))
    y, X, idx = ds.pooled()
    assert X.shape == (6, 2)
    assert idx.tolist() == [0, 0, 0, 1, 1, 1]


def test_expert_validation():
    with pytest.raises(ValidationError):
        ExpertParams("gaussian", [0.0], 0.0)
    with pytest.raises(ValidationError):
        ExpertParams("binomial", [0.0])
    assert ExpertParams("gaussian", [0.0, 1.0], 2.0).dim == 3
    assert ExpertParams("poisson", [0.0, 1.0]).dim == 2


def test_mixing_models():
    s = StaticMixing([5.0, 3.0])
    assert s.K == 2 and s.permuted([1, 0]).alpha.tolist() == [3.0, 5.0]
    with pytest.raises(ValidationError):
        StaticMixing([1.0, 0.0])
    c = CovariateMixing([[np.log(2.0)], [0.0]])
    np.testing.assert_allclose(c.alpha_for([1.0]), [2.0, 1.0])
    with pytest.raises(ValidationError):
        c.alpha_for(None)


def test_config_validation():
    with pytest.raises(ValidationError):
        McemConfig(L=0)
    with pytest.raises(ValidationError):
        McemConfig(epsilon=0.0)
    with pytest.raises(ValidationError):
        McemConfig(pilot_iter=-1)
