"""
Tests for the quantile gradient-boosted trees.
"""

import itertools

import numpy as np
import pytest
from pydantic import ValidationError

from src.errors import DataError
from src.features import FeatureVector
from src.gbdt import (
    GBDTConfig,
    GBDTModel,
    GOSSConfig,
    build_histogram,
    build_histogram_and_split,
    find_best_split,
    fit_quantile_gbdt,
    goss_sample,
    load_gbdt,
    pinball_gradients,
    predict_raw,
    save_gbdt,
)
from src.scoring import mean_quantile_score
from src.tree import TreeBuilder


def _config(**overrides):
    params = dict(
        tau=0.5,
        max_depth=3,
        num_leaves=8,
        min_data_in_leaf=5,
        num_iterations=20,
        early_stopping_round=0,
    )
    params.update(overrides)
    return GBDTConfig(**params)


def _step_data(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=n)
    y = np.where(x < 0, rng.uniform(0.0, 1.0, n), rng.uniform(10.0, 11.0, n))
    return x[:, np.newaxis], y


def _brute_force_split(binned, g, w, n_bins, min_data):
    best = None
    G, H = np.sum(g * w), np.sum(w)
    for f, b in itertools.product(range(binned.shape[1]), range(n_bins - 1)):
        left = binned[:, f] <= b
        if left.sum() < min_data or (~left).sum() < min_data:
            continue
        gl, hl = np.sum(g[left] * w[left]), np.sum(w[left])
        gr, hr = G - gl, H - hl
        if hl <= 0 or hr <= 0:
            continue
        gain = gl**2 / hl + gr**2 / hr - G**2 / H
        if best is None or gain > best[2]:
            best = (f, b, gain)
    return best


def test_config_validation():
    """Test hyperparameter constraints."""
    with pytest.raises(ValidationError):
        GBDTConfig(tau=0.5, max_depth=2, num_leaves=5)
    with pytest.raises(ValidationError):
        GBDTConfig(tau=1.0)
    with pytest.raises(ValidationError):
        GOSSConfig(top_fraction=0.6, rest_fraction=0.5)


def test_pinball_gradients():
    """Test the subgradient convention at a zero residual."""
    np.testing.assert_allclose(
        pinball_gradients(np.array([1.0, 1.0, 0.0]), np.array([1.0, 0.0, 1.0]), 0.9),
        [0.1, 0.1, -0.9],
    )


def test_goss_keep_all():
    """Test that a top fraction covering every sample keeps them all."""
    rows, weights = goss_sample(np.arange(10.0), 0.95, 0.01, seed=0)

    np.testing.assert_array_equal(rows, np.arange(10))
    np.testing.assert_array_equal(weights, np.ones(10))


def test_goss_top_and_sampled_weights():
    """Test two kept samples of weight 1 and two sampled of weight 4."""
    g = np.array([0.1, -5.0, 0.2, 0.3, 4.0, 0.05, -0.4, 0.15, 0.25, 0.35])

    rows, weights = goss_sample(g, 0.2, 0.2, seed=3)

    assert rows.size == 4
    assert set(rows[weights == 1.0]) == {1, 4}
    sampled = rows[weights != 1.0]
    assert sampled.size == 2
    np.testing.assert_allclose(weights[weights != 1.0], 4.0)
    assert not set(sampled) & {1, 4}


def test_goss_tie_order_is_stable():
    """Test that equal gradients keep the lowest indices on top."""
    rows, weights = goss_sample(np.ones(10), 0.2, 0.2, seed=7)

    assert set(rows[weights == 1.0]) == {0, 1}


def test_goss_weighted_sum_is_unbiased(rng):
    """Test that reweighted gradient sums average to the full sum."""
    g = rng.normal(size=200)
    total = g.sum()
    estimates = []
    for seed in range(2000):
        rows, weights = goss_sample(g, 0.2, 0.2, seed=seed)
        estimates.append(np.sum(g[rows] * weights))

    assert np.mean(estimates) == pytest.approx(total, abs=0.05 * np.abs(g).sum())


def test_zero_gradients_do_not_split(rng):
    """Test that all-zero gradients give no split."""
    binned = rng.integers(0, 8, size=(40, 2)).astype(np.uint8)

    split = build_histogram_and_split(
        binned, np.arange(40), np.zeros(40), np.ones(40), 8, 1
    )

    assert split is None


def test_separating_feature_splits_at_the_boundary():
    """Test a single feature separating negative and positive gradients."""
    binned = np.array([[0], [1], [2], [3], [4], [5]], dtype=np.uint8)
    g = np.array([-1.0, -1.0, -1.0, 1.0, 1.0, 1.0])

    split = build_histogram_and_split(binned, np.arange(6), g, np.ones(6), 6, 1)

    assert (split.feature, split.bin_index) == (0, 2)
    assert split.gain == pytest.approx(6.0)
    assert (split.left_count, split.right_count) == (3, 3)


@pytest.mark.parametrize("seed", range(25))
def test_split_matches_exhaustive_enumeration(seed):
    """Test histogram split finding against every (feature, bin) pair."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(8, 65))
    binned = rng.integers(0, 8, size=(n, 2)).astype(np.uint8)
    g = rng.choice([-0.9, 0.1], size=n) + rng.normal(0, 0.01, size=n)
    w = rng.choice([1.0, 4.0], size=n)

    hist = build_histogram(binned, np.arange(n), g, w, 8)
    split = find_best_split(*hist, 2)
    expected = _brute_force_split(binned, g, w, 8, 2)

    parent = np.sum(g * w) ** 2 / np.sum(w)
    if expected is None or expected[2] <= 1e-9 * parent + 1e-12:
        assert split is None
    else:
        assert (split.feature, split.bin_index) == expected[:2]
        assert split.gain == pytest.approx(expected[2], rel=1e-9)


def test_histogram_subset_and_subtraction(rng):
    """Test that a parent histogram minus one child equals the other child."""
    binned = rng.integers(0, 4, size=(30, 3)).astype(np.uint8)
    g = rng.normal(size=30)
    w = np.ones(30)
    left = np.arange(0, 30, 2)
    right = np.arange(1, 30, 2)

    parent = build_histogram(binned, np.arange(30), g, w, 4)
    child_l = build_histogram(binned, left, g, w, 4)
    child_r = build_histogram(binned, right, g, w, 4)

    for p, a, b in zip(parent, child_l, child_r):
        np.testing.assert_allclose(p - a, b, atol=1e-12)
    assert child_l[2].sum() == 15 * 3


@pytest.mark.parametrize("tau", [0.1, 0.5, 0.99])
def test_constant_target(rng, tau):
    """Test that a constant target is predicted exactly."""
    X = rng.normal(size=(200, 3))
    y = np.full(200, 3.25)

    model = fit_quantile_gbdt(X, y, _config(tau=tau))

    np.testing.assert_array_equal(model.predict(X), 3.25)
    assert model.train_scores[-1] == 0.0
    assert model.trees == []


def test_constant_features_give_base_score_model():
    """Test that nothing to split on leaves only the base score."""
    X = np.ones((50, 2))
    y = np.arange(50.0)

    model = fit_quantile_gbdt(X, y, _config(tau=0.9))

    assert model.trees == []
    assert predict_raw(model, np.ones(2)) == model.base_score


def test_independent_target_hits_empirical_quantile(rng):
    """Test that noise predictions stay at the empirical 0.9-quantile."""
    X = rng.normal(size=(10_000, 3))
    y = rng.exponential(2.0, size=10_000)
    config = _config(
        tau=0.9,
        max_depth=1,
        num_leaves=2,
        min_data_in_leaf=4000,
        learning_rate=0.05,
        num_iterations=4,
    )

    model = fit_quantile_gbdt(X, y, config)

    target = np.quantile(y, 0.9, method="inverted_cdf")
    tolerance = 0.02 * target + 0.01
    assert np.all(np.abs(model.predict(X) - target) <= tolerance)


def test_step_data_conditional_medians():
    """Test that step data recovers the median on each side."""
    X, y = _step_data(10_000, seed=8)
    config = _config(
        max_depth=1,
        num_leaves=2,
        min_data_in_leaf=20,
        learning_rate=0.1,
        num_iterations=100,
    )

    model = fit_quantile_gbdt(X, y, config)

    left = model.predict(np.array([[-0.5], [-0.01]]))
    right = model.predict(np.array([[0.01], [0.5]]))
    np.testing.assert_allclose(left, 0.5, atol=0.1)
    np.testing.assert_allclose(right, 10.5, atol=0.1)


def test_training_loss_never_increases():
    """Test that leaf renewal keeps the training score non-increasing."""
    X, y = _step_data(2000, seed=2)

    model = fit_quantile_gbdt(X, y, _config(tau=0.8, num_iterations=30))

    assert np.all(np.diff(model.train_scores) <= 1e-12)
    assert model.train_scores[-1] < model.train_scores[0]


def test_trees_respect_size_limits(rng):
    """Test depth, leaf count and minimum leaf size of every tree."""
    X = rng.normal(size=(3000, 4))
    y = X[:, 0] * 3 + np.abs(X[:, 1]) + rng.normal(size=3000)
    config = _config(max_depth=3, num_leaves=6, min_data_in_leaf=40)

    model = fit_quantile_gbdt(X, y, config)

    assert model.trees
    for tree in model.trees:
        assert tree.depth <= 3
        assert tree.n_leaves <= 6
        assert tree.count[tree.leaves].min() >= 40


def test_early_stopping_on_validation(rng):
    """Test that training halts after the patience and keeps the best round."""
    X = rng.normal(size=(1000, 2))
    y = rng.normal(size=1000)
    Xv = rng.normal(size=(1000, 2))
    yv = rng.normal(size=1000)
    config = _config(
        max_depth=6,
        num_leaves=40,
        min_data_in_leaf=2,
        learning_rate=1.0,
        num_iterations=200,
        early_stopping_round=5,
    )

    model = fit_quantile_gbdt(X, y, config, Xv, yv)

    assert len(model.trees) < 200
    assert len(model.trees) - model.best_iteration == 5
    best = model.best_iteration
    assert model.valid_scores[best] == min(model.valid_scores)
    np.testing.assert_allclose(
        mean_quantile_score(model.predict(Xv), yv, 0.5), model.valid_scores[best]
    )


def test_early_stopping_keeps_base_score_round():
    """Test that round 0 wins when every tree makes validation worse."""
    rng = np.random.default_rng(7)
    X = rng.normal(size=(400, 2))
    y = 5.0 * np.sign(X[:, 0]) + rng.normal(scale=0.1, size=400)
    # Validation reverses the training relation
    Xv = rng.normal(size=(400, 2))
    yv = -5.0 * np.sign(Xv[:, 0])
    config = _config(
        min_data_in_leaf=10,
        learning_rate=1.0,
        num_iterations=100,
        early_stopping_round=5,
    )

    model = fit_quantile_gbdt(X, y, config, Xv, yv)

    assert model.valid_scores[1] > model.valid_scores[0]
    assert model.valid_scores[0] == min(model.valid_scores)
    assert model.best_iteration == 0
    assert 1 <= len(model.trees) <= 5
    np.testing.assert_array_equal(model.predict(Xv[:3]), [model.base_score] * 3)


def test_early_stopping_needs_validation(rng):
    """Test the validation-set requirement and empty training data."""
    X = rng.normal(size=(20, 2))
    with pytest.raises(DataError):
        fit_quantile_gbdt(X, np.ones(20), _config(early_stopping_round=3))
    with pytest.raises(DataError):
        fit_quantile_gbdt(np.empty((0, 2)), np.empty(0), _config())


def test_goss_training_is_deterministic(rng):
    """Test that sampled boosting repeats exactly for one seed."""
    X, y = _step_data(2000, seed=4)
    goss = GOSSConfig(top_fraction=0.2, rest_fraction=0.1)
    config = _config(goss=goss, seed=11)

    first = fit_quantile_gbdt(X, y, config)
    second = fit_quantile_gbdt(X, y, config)

    np.testing.assert_array_equal(first.predict(X), second.predict(X))
    assert first.train_scores[-1] < first.train_scores[0]


def test_predict_raw_on_hand_built_models():
    """Test base-score-only, zero-leaf and traced two-leaf models."""
    empty = GBDTModel(2.0, [], 0.1, 0.5, 1, 0)
    assert predict_raw(empty, np.array([7.0])) == 2.0

    builder = TreeBuilder()
    root = builder.add_node(count=4, depth=0)
    left, right = builder.split(root, 0, 0, 1.0, 2, 2)
    zero_tree = builder.build()
    zeros = GBDTModel(2.0, [zero_tree], 0.1, 0.5, 1, 1)
    assert predict_raw(zeros, np.array([7.0])) == 2.0

    builder.value[left] = -4.0
    builder.value[right] = 6.0
    traced = GBDTModel(2.0, [builder.build()], 0.5, 0.5, 1, 1)
    assert predict_raw(traced, np.array([0.5])) == 0.0
    assert predict_raw(traced, np.array([1.5])) == 5.0
    np.testing.assert_array_equal(
        predict_raw(traced, np.array([[0.5], [1.0], [1.5]])), [0.0, 0.0, 5.0]
    )


def test_predict_raw_checks_feature_count(small_samples):
    """Test feature vectors and the feature-count check."""
    y = small_samples.target
    model = fit_quantile_gbdt(
        small_samples.features, y, _config(tau=0.9, num_iterations=5)
    )
    vector = FeatureVector.from_array(small_samples.features[0])

    assert predict_raw(model, vector) == model.predict(small_samples.features[:1])[0]
    with pytest.raises(DataError):
        predict_raw(model, np.zeros(5))


def test_save_and_load_predict_identically(tmp_path, rng):
    """Test that a saved model reproduces its predictions bit for bit."""
    X, y = _step_data(1000, seed=6)
    model = fit_quantile_gbdt(X, y, _config(tau=0.97, num_iterations=15))
    path = tmp_path / "model.json"

    save_gbdt(model, path)
    loaded = load_gbdt(path)

    query = rng.uniform(-2, 2, size=(500, 1))
    np.testing.assert_array_equal(loaded.predict(query), model.predict(query))
    assert loaded.config == model.config
    assert loaded.best_iteration == model.best_iteration


def test_load_rejects_other_files(tmp_path):
    """Test that a foreign JSON file is refused."""
    path = tmp_path / "other.json"
    path.write_text('{"format": "something-else"}', encoding="utf-8")

    with pytest.raises(DataError):
        load_gbdt(path)
