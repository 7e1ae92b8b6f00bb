"""
Tree storage, feature binning and routing shared by the boosting and
forest learners.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List

import numpy as np

from src.errors import DataError

LEAF = -1


def check_features(X: np.ndarray, feature_count: int) -> np.ndarray:
    """
    Coerce a feature matrix and check its width.

    Args:
        X: One feature vector or a matrix of shape (n, feature_count)
        feature_count: Expected number of features

    Returns:
        Float64 matrix of shape (n, feature_count)
    """
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[np.newaxis, :]
    if arr.ndim != 2 or arr.shape[1] != feature_count:
        raise DataError(
            f"expected {feature_count} features, got shape {np.shape(X)}"
        )
    if not np.all(np.isfinite(arr)):
        raise DataError("features must be finite")
    return arr


class BinMapper:
    """
    Map each feature onto at most ``n_bins`` ordered bins.

    A value x falls in bin b = #{thresholds < x}, so ``bin <= b`` holds
    exactly when ``x <= thresholds[b]``. Thresholds are midpoints between
    distinct values when a feature has few of them, otherwise quantiles of
    the training column.
    """

    def __init__(self, n_bins: int = 255):
        if not 2 <= n_bins <= 256:
            raise ValueError(f"n_bins must be in [2, 256], got {n_bins}")
        self.n_bins = n_bins
        self.thresholds_: List[np.ndarray] = []

    def fit(self, X: np.ndarray) -> "BinMapper":
        X = np.asarray(X, dtype=np.float64)
        self.thresholds_ = [self._column_thresholds(X[:, f]) for f in range(X.shape[1])]
        return self

    def _column_thresholds(self, column: np.ndarray) -> np.ndarray:
        distinct = np.unique(column)
        if distinct.size <= self.n_bins:
            return (distinct[:-1] + distinct[1:]) / 2.0
        levels = np.linspace(0.0, 1.0, self.n_bins + 1)[1:-1]
        cuts = np.unique(np.quantile(column, levels, method="inverted_cdf"))
        # The largest value would leave its bin empty
        return cuts[cuts < distinct[-1]]

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        binned = np.empty(X.shape, dtype=np.uint8)
        for f, thresholds in enumerate(self.thresholds_):
            binned[:, f] = np.searchsorted(thresholds, X[:, f], side="left")
        return binned

    def threshold(self, feature: int, bin_index: int) -> float:
        return float(self.thresholds_[feature][bin_index])


@dataclass
class TreeStructure:
    """
    Binary tree stored as parallel node arrays.

    Internal nodes send ``x[feature] <= threshold`` left. Leaves have
    ``feature == -1`` and carry ``value``. ``count`` is the number of
    samples each node received while the tree was grown.
    """

    feature: np.ndarray
    threshold: np.ndarray
    bin_threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray
    depth: int = 0
    node_depth: np.ndarray = field(default=None)

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.intp)
        self.threshold = np.asarray(self.threshold, dtype=np.float64)
        self.bin_threshold = np.asarray(self.bin_threshold, dtype=np.intp)
        self.left = np.asarray(self.left, dtype=np.intp)
        self.right = np.asarray(self.right, dtype=np.intp)
        self.value = np.asarray(self.value, dtype=np.float64)
        self.count = np.asarray(self.count, dtype=np.int64)
        if self.node_depth is None:
            self.node_depth = _node_depths(self.left, self.right)
        self.node_depth = np.asarray(self.node_depth, dtype=np.intp)
        self.depth = int(self.node_depth.max()) if self.node_depth.size else 0

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature == LEAF)

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self.feature == LEAF))

    def _route(self, n: int, goes_left) -> np.ndarray:
        node = np.zeros(n, dtype=np.intp)
        for _ in range(self.depth):
            rows = np.flatnonzero(self.feature[node] != LEAF)
            if rows.size == 0:
                break
            current = node[rows]
            left = goes_left(rows, current)
            node[rows] = np.where(left, self.left[current], self.right[current])
        return node

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node index for every row of a raw feature matrix."""
        return self._route(
            X.shape[0],
            lambda rows, nodes: X[rows, self.feature[nodes]] <= self.threshold[nodes],
        )

    def apply_binned(self, binned: np.ndarray) -> np.ndarray:
        """Leaf node index for every row of a binned feature matrix."""
        return self._route(
            binned.shape[0],
            lambda rows, nodes: binned[rows, self.feature[nodes]]
            <= self.bin_threshold[nodes],
        )

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "bin_threshold": self.bin_threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "count": self.count.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TreeStructure":
        return cls(
            feature=data["feature"],
            threshold=data["threshold"],
            bin_threshold=data["bin_threshold"],
            left=data["left"],
            right=data["right"],
            value=data["value"],
            count=data["count"],
        )


def _node_depths(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    depth = np.zeros(left.size, dtype=np.intp)
    # Children are always created after their parent
    for node in range(left.size):
        if left[node] != LEAF:
            depth[left[node]] = depth[node] + 1
            depth[right[node]] = depth[node] + 1
    return depth


class TreeBuilder:
    """Append-only node list used while a tree is grown."""

    def __init__(self):
        self.feature: List[int] = []
        self.threshold: List[float] = []
        self.bin_threshold: List[int] = []
        self.left: List[int] = []
        self.right: List[int] = []
        self.value: List[float] = []
        self.count: List[int] = []
        self.node_depth: List[int] = []

    def add_node(self, count: int, depth: int, value: float = 0.0) -> int:
        self.feature.append(LEAF)
        self.threshold.append(0.0)
        self.bin_threshold.append(0)
        self.left.append(LEAF)
        self.right.append(LEAF)
        self.value.append(value)
        self.count.append(count)
        self.node_depth.append(depth)
        return len(self.feature) - 1

    def split(
        self,
        node: int,
        feature: int,
        bin_index: int,
        threshold: float,
        left_count: int,
        right_count: int,
    ):
        depth = self.node_depth[node] + 1
        left = self.add_node(left_count, depth)
        right = self.add_node(right_count, depth)
        self.feature[node] = feature
        self.bin_threshold[node] = bin_index
        self.threshold[node] = threshold
        self.left[node] = left
        self.right[node] = right
        return left, right

    def build(self) -> TreeStructure:
        return TreeStructure(
            feature=self.feature,
            threshold=self.threshold,
            bin_threshold=self.bin_threshold,
            left=self.left,
            right=self.right,
            value=self.value,
            count=self.count,
            node_depth=self.node_depth,
        )
