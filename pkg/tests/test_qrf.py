"""
Tests for quantile regression forests.
"""

import numpy as np
import pytest

from src.errors import DataError
from src.qrf import (
    ForestTree,
    LeafMembership,
    QRFConfig,
    QRFModel,
    WeightedCDF,
    conditional_cdf,
    fit_qrf,
    load_qrf,
    predict_mean,
    predict_quantile,
    predict_quantiles,
    qrf_weights,
    save_qrf,
)
from src.tree import TreeBuilder

TAUS = [0.5, 0.9, 0.97, 0.999]


def _split_tree(left_members, n):
    """One split at x <= 0.5 with the given left leaf members."""
    builder = TreeBuilder()
    root = builder.add_node(count=n, depth=0)
    builder.split(root, 0, 0, 0.5, len(left_members), n - len(left_members))
    structure = builder.build()
    right_members = [i for i in range(n) if i not in left_members]
    return ForestTree(
        structure=structure,
        slot_of_node=np.array([-1, 0, 1]),
        offsets=np.array([0, len(left_members), n]),
        members=np.array(list(left_members) + right_members),
    )


def _model(trees, targets):
    return QRFModel(
        trees=trees,
        targets=np.asarray(targets, dtype=float),
        feature_count=1,
        config=QRFConfig(n_trees=len(trees), mtry=1),
    )


def _brute_weights(model, X_train, x):
    weights = np.zeros(model.n_train)
    for tree in model.trees:
        leaf = tree.structure.apply(x[np.newaxis, :])[0]
        members = np.flatnonzero(tree.structure.apply(X_train) == leaf)
        weights[members] += 1.0 / members.size
    return weights / len(model.trees)


def _brute_quantile(targets, weights, tau):
    order = np.argsort(targets, kind="stable")
    cumulative = np.cumsum(weights[order])
    return targets[order][np.argmax(cumulative >= tau - 1e-12)]


def test_single_leaf_weights():
    """Test uniform weights over the two members of the query's leaf."""
    model = _model([_split_tree([3, 7], 10)], np.arange(10.0))

    weights = qrf_weights(model, np.array([0.0]))

    expected = np.zeros(10)
    expected[[3, 7]] = 0.5
    np.testing.assert_array_equal(weights, expected)


def test_two_tree_weights_average():
    """Test the average of two trees' leaf weights."""
    model = _model([_split_tree([1, 2], 5), _split_tree([2, 3], 5)], np.arange(5.0))

    weights = qrf_weights(model, np.array([0.0]))

    np.testing.assert_allclose(weights, [0.0, 0.25, 0.5, 0.25, 0.0])
    assert weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_quantiles_use_infimum_convention():
    """Test uniform weights over four atoms."""
    builder = TreeBuilder()
    builder.add_node(count=4, depth=0)
    tree = ForestTree(
        structure=builder.build(),
        slot_of_node=np.array([0]),
        offsets=np.array([0, 4]),
        members=np.arange(4),
    )
    model = _model([tree], [3.0, 1.0, 4.0, 2.0])

    assert predict_quantile(model, np.array([0.0]), 0.5) == 2.0
    assert predict_quantile(model, np.array([0.0]), 0.9) == 4.0
    np.testing.assert_array_equal(
        predict_quantiles(model, np.array([[0.0]]), [0.25, 0.5, 0.9]), [[1.0, 2.0, 4.0]]
    )
    cdf = conditional_cdf(model, np.array([0.0]))
    assert cdf.cdf(2.5) == 0.5
    assert cdf.mean() == 2.5


def test_weighted_cdf_validation():
    """Test sorted support and normalized weights."""
    with pytest.raises(DataError):
        WeightedCDF([2.0, 1.0], [0.5, 0.5])
    with pytest.raises(DataError):
        WeightedCDF([1.0, 2.0], [0.5, 0.6])
    assert WeightedCDF([1.0, 2.0], [0.5, 0.5]).quantile(0.5) == 1.0


def test_hand_traced_tree():
    """Test leaf membership of a small tree against hand enumeration."""
    X = np.arange(8.0)[:, np.newaxis]
    y = np.array([0, 0, 10, 10, 20, 20, 30, 30], dtype=float)
    config = QRFConfig(n_trees=1, mtry=1, min_node_size=2, bootstrap=False)

    model = fit_qrf(X, y, config)

    tree = model.trees[0]
    assert tree.structure.threshold[0] == 3.5
    assert tree.structure.depth == 2
    leaves = [
        sorted(tree.leaf_members(node).tolist()) for node in tree.structure.leaves
    ]
    assert sorted(leaves) == [[0, 1], [2, 3], [4, 5], [6, 7]]
    assert predict_quantile(model, np.array([2.2]), 0.5) == 10.0


def test_full_purity_without_bootstrap(rng):
    """Test that unrestricted growth isolates every sample."""
    X = np.column_stack([np.arange(12.0), rng.normal(size=12)])
    y = np.arange(12.0) * 1.5
    config = QRFConfig(n_trees=1, mtry=2, min_node_size=1, bootstrap=False)

    model = fit_qrf(X, y, config)

    tree = model.trees[0]
    assert tree.structure.n_leaves == 12
    assert np.all(np.diff(tree.offsets) == 1)
    np.testing.assert_array_equal(predict_quantiles(model, X, [0.5])[:, 0], y)


def test_constant_target(rng):
    """Test that a constant target gives that constant at every level."""
    X = rng.normal(size=(60, 3))
    y = np.full(60, 7.5)

    model = fit_qrf(X, y, QRFConfig(n_trees=5, mtry=2, seed=1))

    np.testing.assert_array_equal(predict_quantiles(model, X[:10], TAUS), 7.5)


def test_all_zero_targets(rng):
    """Test that all-zero targets predict zero."""
    X = rng.normal(size=(60, 3))

    model = fit_qrf(X, np.zeros(60), QRFConfig(n_trees=5, mtry=2, seed=1))

    assert np.all(predict_quantiles(model, X, TAUS) == 0.0)


@pytest.mark.parametrize("seed", range(10))
def test_weights_and_quantiles_match_brute_force(seed):
    """Test weights and quantiles against recomputation from all samples."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(10, 31))
    X = rng.normal(size=(n, 3))
    y = np.round(rng.exponential(2.0, size=n), 1)
    config = QRFConfig(n_trees=7, mtry=2, min_node_size=2, seed=seed)
    model = fit_qrf(X, y, config)
    queries = rng.normal(size=(5, 3))

    batch = predict_quantiles(model, queries, TAUS)

    for q, x in enumerate(queries):
        expected = _brute_weights(model, X, x)
        np.testing.assert_array_equal(qrf_weights(model, x), expected)
        for t, tau in enumerate(TAUS):
            value = _brute_quantile(y, expected, tau)
            assert predict_quantile(model, x, tau) == value
            assert batch[q, t] == value


def test_predictions_stay_in_training_range(sample_factory, rng):
    """Test that every quantile lies within the training target range."""
    samples = sample_factory(400, seed=2)
    model = fit_qrf(
        samples.features, samples.target, QRFConfig(n_trees=20, mtry=4, seed=3)
    )
    queries = rng.uniform(-50.0, 50.0, size=(1000, samples.features.shape[1]))

    predictions = predict_quantiles(model, queries, TAUS + [0.01])

    assert predictions.min() >= samples.target.min()
    assert predictions.max() <= samples.target.max()
    assert np.all(np.diff(predictions[:, :-1], axis=1) >= 0)


def test_predict_mean_matches_weights(sample_factory):
    """Test the weighted mean against explicit weights."""
    samples = sample_factory(200, seed=4)
    model = fit_qrf(
        samples.features, samples.target, QRFConfig(n_trees=10, mtry=4, seed=5)
    )

    means = predict_mean(model, samples.features[:5])

    for i in range(5):
        weights = qrf_weights(model, samples.features[i])
        assert means[i] == pytest.approx(np.dot(weights, samples.target), rel=1e-12)


def test_inbag_membership(sample_factory):
    """Test leaves filled from bootstrap samples only."""
    samples = sample_factory(150, seed=6)
    config = QRFConfig(
        n_trees=5, mtry=3, seed=2, leaf_membership=LeafMembership.INBAG
    )

    model = fit_qrf(samples.features, samples.target, config)

    for tree in model.trees:
        assert tree.members.size == 150
        assert np.unique(tree.members).size < 150
    weights = qrf_weights(model, samples.features[0])
    assert weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_results_do_not_depend_on_workers(sample_factory):
    """Test that parallel growth gives the same forest."""
    samples = sample_factory(200, seed=7)
    config = QRFConfig(n_trees=8, mtry=4, seed=9)

    serial = fit_qrf(samples.features, samples.target, config, n_jobs=1)
    parallel = fit_qrf(samples.features, samples.target, config, n_jobs=2)

    np.testing.assert_array_equal(
        predict_quantiles(serial, samples.features, TAUS),
        predict_quantiles(parallel, samples.features, TAUS),
    )


def test_fit_errors(rng):
    """Test empty data and an oversized feature draw."""
    with pytest.raises(DataError):
        fit_qrf(np.empty((0, 3)), np.empty(0), QRFConfig(mtry=2))
    with pytest.raises(DataError):
        fit_qrf(rng.normal(size=(10, 3)), np.ones(10), QRFConfig(mtry=4))


def test_save_and_load_predict_identically(tmp_path, sample_factory, rng):
    """Test that a saved forest reproduces its predictions bit for bit."""
    samples = sample_factory(200, seed=8)
    model = fit_qrf(
        samples.features, samples.target, QRFConfig(n_trees=6, mtry=4, seed=1)
    )
    path = tmp_path / "qrf.json"

    save_qrf(model, path)
    loaded = load_qrf(path)

    queries = rng.uniform(0.0, 10.0, size=(300, samples.features.shape[1]))
    np.testing.assert_array_equal(
        predict_quantiles(loaded, queries, TAUS),
        predict_quantiles(model, queries, TAUS),
    )
    assert loaded.config == model.config
