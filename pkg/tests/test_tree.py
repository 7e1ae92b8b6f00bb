"""
Tests for feature binning and tree storage.
"""

import numpy as np
import pytest

from src.errors import DataError
from src.tree import LEAF, BinMapper, TreeBuilder, TreeStructure, check_features


def _two_level_tree():
    builder = TreeBuilder()
    root = builder.add_node(count=8, depth=0)
    left, right = builder.split(root, 0, 3, 3.5, 4, 4)
    builder.split(right, 1, 0, 0.5, 2, 2)
    tree = builder.build()
    tree.value[:] = [0.0, -1.0, 0.0, 2.0, 3.0]
    return tree


def test_few_distinct_values_get_midpoints():
    """Test exact midpoint thresholds for a small feature."""
    X = np.array([[0.0], [1.0], [1.0], [3.0]])

    mapper = BinMapper(255).fit(X)

    np.testing.assert_allclose(mapper.thresholds_[0], [0.5, 2.0])
    np.testing.assert_array_equal(mapper.transform(X)[:, 0], [0, 1, 1, 2])
    assert mapper.threshold(0, 1) == 2.0


def test_many_distinct_values_are_capped(rng):
    """Test that a continuous feature uses at most n_bins bins."""
    X = rng.normal(size=(5000, 2))

    mapper = BinMapper(16).fit(X)
    binned = mapper.transform(X)

    assert binned.max() <= 15
    for f in range(2):
        thresholds = mapper.thresholds_[f]
        assert thresholds.size <= 15
        assert np.all(np.diff(thresholds) > 0)
        # bin <= b exactly when x <= threshold b
        for b in range(thresholds.size):
            np.testing.assert_array_equal(
                binned[:, f] <= b, X[:, f] <= thresholds[b]
            )
        assert np.bincount(binned[:, f]).min() > 0


def test_bin_mapper_rejects_bin_count():
    """Test the allowed range of bins."""
    with pytest.raises(ValueError):
        BinMapper(1)
    with pytest.raises(ValueError):
        BinMapper(300)


def test_tree_routing():
    """Test raw and binned routing through a hand-built tree."""
    tree = _two_level_tree()
    X = np.array([[2.0, 9.0], [4.0, 0.0], [4.0, 1.0]])
    binned = np.array([[1, 5], [7, 0], [7, 1]])

    assert tree.n_nodes == 5
    assert tree.n_leaves == 3
    assert tree.depth == 2
    np.testing.assert_array_equal(tree.apply(X), [1, 3, 4])
    np.testing.assert_array_equal(tree.apply_binned(binned), [1, 3, 4])
    np.testing.assert_array_equal(tree.predict(X), [-1.0, 2.0, 3.0])
    np.testing.assert_array_equal(tree.leaves, [1, 3, 4])


def test_tree_dict_round_trip():
    """Test that a tree survives conversion to plain lists."""
    tree = _two_level_tree()

    copy = TreeStructure.from_dict(tree.to_dict())

    np.testing.assert_array_equal(copy.feature, tree.feature)
    np.testing.assert_array_equal(copy.value, tree.value)
    np.testing.assert_array_equal(copy.node_depth, [0, 1, 1, 2, 2])
    assert copy.feature[1] == LEAF


def test_single_leaf_tree():
    """Test a tree with only its root."""
    builder = TreeBuilder()
    builder.add_node(count=3, depth=0, value=1.5)
    tree = builder.build()

    assert tree.depth == 0
    np.testing.assert_array_equal(tree.predict(np.zeros((3, 2))), [1.5, 1.5, 1.5])


def test_check_features():
    """Test feature matrix coercion and width checks."""
    assert check_features([1.0, 2.0], 2).shape == (1, 2)
    with pytest.raises(DataError):
        check_features(np.zeros((3, 4)), 5)
    with pytest.raises(DataError):
        check_features([[np.nan, 1.0]], 2)
