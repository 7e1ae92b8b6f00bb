"""
Histogram-based, leaf-wise gradient-boosted trees on the pinball loss.

Each round fits one tree to the pinball subgradients
g = I(prediction - target >= 0) - tau with unit curvature, then renews
every leaf to the tau-quantile of the residuals (target - prediction) of
the training samples routed to it. Renewal makes the training loss
non-increasing from round to round.
"""

import heapq
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.errors import DataError
from src.scoring import as_tau, mean_quantile_score
from src.tree import BinMapper, TreeBuilder, TreeStructure, check_features

# Configure logger
logger = logging.getLogger(__name__)

FORMAT_NAME = "quantmerge-gbdt"
FORMAT_VERSION = 1

# Gains within rounding noise of the parent term are treated as zero
_GAIN_TOL = 1e-9
_GAIN_FLOOR = 1e-12


class GOSSConfig(BaseModel):
    """Gradient-based one-side sampling fractions."""

    model_config = ConfigDict(frozen=True)

    top_fraction: float = Field(gt=0.0, lt=1.0)
    rest_fraction: float = Field(gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def check_total(self):
        if self.top_fraction + self.rest_fraction > 1.0:
            raise ValueError("top_fraction + rest_fraction must not exceed 1")
        return self


class GBDTConfig(BaseModel):
    """
    Boosting hyperparameters for one quantile level.

    Attributes:
        tau: Quantile level of the pinball loss
        max_depth: Maximum depth of a tree (root has depth 0)
        min_data_in_leaf: Minimum training samples in every leaf
        learning_rate: Shrinkage applied to every tree
        num_iterations: Maximum number of boosting rounds
        num_leaves: Maximum number of leaves per tree
        early_stopping_round: Rounds without validation improvement before
            stopping; 0 disables early stopping
        n_bins: Histogram bins per feature
        goss: Optional gradient-based one-side sampling
        seed: Seed for sampling
    """

    model_config = ConfigDict(frozen=True)

    tau: float = Field(gt=0.0, lt=1.0)
    max_depth: int = Field(default=8, ge=1)
    min_data_in_leaf: int = Field(default=20, ge=1)
    learning_rate: float = Field(default=0.1, gt=0.0)
    num_iterations: int = Field(default=100, ge=1)
    num_leaves: int = Field(default=31, ge=1)
    early_stopping_round: int = Field(default=20, ge=0)
    n_bins: int = Field(default=255, ge=2, le=256)
    goss: Optional[GOSSConfig] = None
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def check_leaves(self):
        if self.num_leaves > 2**self.max_depth:
            raise ValueError(
                f"num_leaves={self.num_leaves} exceeds 2^max_depth={2**self.max_depth}"
            )
        return self


@dataclass
class GBDTModel:
    """
    Additive tree ensemble at a fixed quantile level.

    Prediction is ``base_score + learning_rate * sum(tree outputs)`` over
    the first ``best_iteration`` trees.
    """

    base_score: float
    trees: List[TreeStructure]
    learning_rate: float
    tau: float
    feature_count: int
    best_iteration: int
    config: Optional[GBDTConfig] = None
    train_scores: List[float] = field(default_factory=list)
    valid_scores: List[float] = field(default_factory=list)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = check_features(X, self.feature_count)
        out = np.full(X.shape[0], self.base_score)
        for tree in self.trees[: self.best_iteration]:
            out += self.learning_rate * tree.predict(X)
        return out


@dataclass
class SplitInfo:
    """Best split of one node."""

    feature: int
    bin_index: int
    gain: float
    left_count: int
    right_count: int


def goss_sample(
    gradients: np.ndarray, a: float, b: float, seed: int
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gradient-based one-side sampling.

    Keeps the ceil(a * n) samples with the largest |gradient| (ties in
    index order) with weight 1 and draws ceil(b * n) of the rest uniformly
    without replacement with weight (1 - a) / b.

    Args:
        gradients: Per-sample gradients
        a: Fraction kept by gradient magnitude
        b: Fraction sampled from the remainder
        seed: Sampling seed

    Returns:
        Tuple of (sorted selected indices, weights aligned with them)
    """
    config = GOSSConfig(top_fraction=a, rest_fraction=b)
    g = np.asarray(gradients, dtype=np.float64)
    n = g.size
    if n == 0:
        raise DataError("goss_sample needs at least one gradient")

    order = np.argsort(-np.abs(g), kind="stable")
    n_top = min(n, math.ceil(config.top_fraction * n))
    rest = order[n_top:]
    n_rest = min(rest.size, math.ceil(config.rest_fraction * n))

    rng = np.random.default_rng(seed)
    sampled = rng.choice(rest, size=n_rest, replace=False) if n_rest else rest[:0]

    selected = np.concatenate([order[:n_top], sampled])
    weights = np.concatenate(
        [
            np.ones(n_top),
            np.full(sampled.size, (1.0 - config.top_fraction) / config.rest_fraction),
        ]
    )
    sorter = np.argsort(selected, kind="stable")
    return selected[sorter], weights[sorter]


def build_histogram(
    binned: np.ndarray,
    sample_indices: np.ndarray,
    gradients: np.ndarray,
    weights: np.ndarray,
    n_bins: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Per-feature, per-bin sums of weighted gradients, weights and counts.

    Args:
        binned: Binned training matrix (n, p)
        sample_indices: Rows belonging to the node
        gradients: Gradient of every training row
        weights: Sampling weight of every training row
        n_bins: Bins per feature

    Returns:
        Tuple of (gradient sums, weight sums, counts), each of shape (p, n_bins)
    """
    p = binned.shape[1]
    keys = binned[sample_indices].astype(np.intp) + np.arange(p) * n_bins
    keys = keys.ravel()
    size = p * n_bins
    w = weights[sample_indices]
    grad = np.bincount(
        keys, weights=np.repeat(gradients[sample_indices] * w, p), minlength=size
    )
    hess = np.bincount(keys, weights=np.repeat(w, p), minlength=size)
    count = np.bincount(keys, minlength=size)
    return (
        grad.reshape(p, n_bins),
        hess.reshape(p, n_bins),
        count.reshape(p, n_bins),
    )


def split_gain(gl, hl, gr, hr) -> np.ndarray:
    """Squared-gradient-sum gain under unit curvature."""
    g, h = gl + gr, hl + hr
    with np.errstate(divide="ignore", invalid="ignore"):
        return gl**2 / hl + gr**2 / hr - g**2 / h


def find_best_split(
    grad_hist: np.ndarray,
    hess_hist: np.ndarray,
    count_hist: np.ndarray,
    min_data_in_leaf: int,
) -> Optional[SplitInfo]:
    """
    Scan bin boundaries of every feature for the best split.

    A split at bin b sends bins <= b left. Both children need
    ``min_data_in_leaf`` samples. Ties go to the lowest feature, then the
    lowest bin.

    Returns:
        The best split, or None when no split has positive gain
    """
    gl = np.cumsum(grad_hist, axis=1)[:, :-1]
    hl = np.cumsum(hess_hist, axis=1)[:, :-1]
    cl = np.cumsum(count_hist, axis=1)[:, :-1]
    g_total = grad_hist[0].sum()
    h_total = hess_hist[0].sum()
    c_total = count_hist[0].sum()

    gain = split_gain(gl, hl, g_total - gl, h_total - hl)
    allowed = (cl >= min_data_in_leaf) & (c_total - cl >= min_data_in_leaf)
    allowed &= (hl > 0) & (h_total - hl > 0)
    gain = np.where(allowed, gain, -np.inf)

    flat = int(np.argmax(gain))
    feature, bin_index = divmod(flat, gain.shape[1])
    best = gain[feature, bin_index]
    parent = g_total**2 / h_total if h_total > 0 else 0.0
    if not np.isfinite(best) or best <= _GAIN_TOL * parent + _GAIN_FLOOR:
        return None
    left_count = int(cl[feature, bin_index])
    return SplitInfo(
        feature=int(feature),
        bin_index=int(bin_index),
        gain=float(best),
        left_count=left_count,
        right_count=int(c_total) - left_count,
    )


def build_histogram_and_split(
    binned: np.ndarray,
    sample_indices: np.ndarray,
    gradients: np.ndarray,
    weights: np.ndarray,
    n_bins: int,
    min_data_in_leaf: int,
) -> Optional[SplitInfo]:
    """Build the node histogram and return its best split, if any."""
    hist = build_histogram(binned, sample_indices, gradients, weights, n_bins)
    return find_best_split(*hist, min_data_in_leaf)


class _Node:
    __slots__ = ("node_id", "depth", "indices", "hist", "split")

    def __init__(self, node_id, depth, indices, hist):
        self.node_id = node_id
        self.depth = depth
        self.indices = indices
        self.hist = hist
        self.split: Optional[SplitInfo] = None


class TreeGrower:
    """
    Best-first tree growth: always split the frontier leaf with the
    largest gain until ``num_leaves`` is reached or nothing can split.
    """

    def __init__(
        self,
        binned: np.ndarray,
        bin_mapper: BinMapper,
        gradients: np.ndarray,
        weights: np.ndarray,
        sample_indices: np.ndarray,
        config: GBDTConfig,
    ):
        self.binned = binned
        self.bin_mapper = bin_mapper
        self.gradients = gradients
        self.weights = weights
        self.config = config
        self.n_bins = config.n_bins
        self.builder = TreeBuilder()
        self.splittable: List[Tuple[float, int, _Node]] = []

        root_id = self.builder.add_node(count=sample_indices.size, depth=0)
        hist = build_histogram(binned, sample_indices, gradients, weights, self.n_bins)
        self._push(_Node(root_id, 0, sample_indices, hist))

    def _push(self, node: _Node) -> None:
        if node.depth >= self.config.max_depth:
            return
        if node.indices.size < 2 * self.config.min_data_in_leaf:
            return
        node.split = find_best_split(*node.hist, self.config.min_data_in_leaf)
        if node.split is not None:
            heapq.heappush(self.splittable, (-node.split.gain, node.node_id, node))

    def grow(self) -> TreeStructure:
        n_leaves = 1
        while self.splittable and n_leaves < self.config.num_leaves:
            _, _, node = heapq.heappop(self.splittable)
            self._split_node(node)
            n_leaves += 1
        return self.builder.build()

    def _split_node(self, node: _Node) -> None:
        split = node.split
        goes_left = self.binned[node.indices, split.feature] <= split.bin_index
        left_idx = node.indices[goes_left]
        right_idx = node.indices[~goes_left]
        left_id, right_id = self.builder.split(
            node.node_id,
            split.feature,
            split.bin_index,
            self.bin_mapper.threshold(split.feature, split.bin_index),
            left_idx.size,
            right_idx.size,
        )

        # Build the smaller child, derive the sibling by subtraction
        small_first = left_idx.size <= right_idx.size
        small_idx = left_idx if small_first else right_idx
        small_hist = build_histogram(
            self.binned, small_idx, self.gradients, self.weights, self.n_bins
        )
        large_hist = tuple(p - s for p, s in zip(node.hist, small_hist))
        left_hist, right_hist = (
            (small_hist, large_hist) if small_first else (large_hist, small_hist)
        )
        node.hist = None
        depth = node.depth + 1
        self._push(_Node(left_id, depth, left_idx, left_hist))
        self._push(_Node(right_id, depth, right_idx, right_hist))


def empirical_quantile(values: np.ndarray, tau: float) -> float:
    """Smallest value whose empirical CDF reaches tau."""
    return float(np.quantile(values, tau, method="inverted_cdf"))


def _renew_leaves(tree: TreeStructure, leaf_of: np.ndarray, residuals, tau) -> None:
    order = np.argsort(leaf_of, kind="stable")
    sorted_leaves = leaf_of[order]
    bounds = np.flatnonzero(np.diff(sorted_leaves)) + 1
    for group in np.split(order, bounds):
        tree.value[leaf_of[group[0]]] = empirical_quantile(residuals[group], tau)


def pinball_gradients(predictions: np.ndarray, targets: np.ndarray, tau: float):
    """Subgradient I(prediction - target >= 0) - tau."""
    return np.where(predictions - targets >= 0.0, 1.0, 0.0) - tau


def fit_quantile_gbdt(
    X_train: np.ndarray,
    y_train: np.ndarray,
    config: GBDTConfig,
    X_valid: Optional[np.ndarray] = None,
    y_valid: Optional[np.ndarray] = None,
) -> GBDTModel:
    """
    Train a boosted ensemble on the pinball loss at ``config.tau``.

    Args:
        X_train: Training features (n, p)
        y_train: Training targets
        config: Hyperparameters
        X_valid: Validation features, required when early stopping is on
        y_valid: Validation targets

    Returns:
        Fitted GBDTModel
    """
    tau = as_tau(config.tau)
    y_train = np.asarray(y_train, dtype=np.float64)
    if y_train.size == 0:
        raise DataError("training set is empty")
    X_train = check_features(X_train, np.shape(X_train)[-1])
    if X_train.shape[0] != y_train.size:
        raise DataError("training features and targets differ in length")

    use_valid = X_valid is not None and y_valid is not None and len(y_valid) > 0
    if config.early_stopping_round > 0 and not use_valid:
        raise DataError("early stopping needs a non-empty validation set")
    if use_valid:
        X_valid = check_features(X_valid, X_train.shape[1])
        y_valid = np.asarray(y_valid, dtype=np.float64)

    mapper = BinMapper(config.n_bins).fit(X_train)
    binned = mapper.transform(X_train)
    n = y_train.size

    base_score = empirical_quantile(y_train, tau)
    train_pred = np.full(n, base_score)
    valid_pred = np.full(y_valid.size, base_score) if use_valid else None

    model = GBDTModel(
        base_score=base_score,
        trees=[],
        learning_rate=config.learning_rate,
        tau=tau,
        feature_count=X_train.shape[1],
        best_iteration=0,
        config=config,
        train_scores=[mean_quantile_score(train_pred, y_train, tau)],
    )
    if use_valid:
        model.valid_scores.append(mean_quantile_score(valid_pred, y_valid, tau))

    # Round 0 (base score only) is a candidate best round
    best_score = model.valid_scores[0] if use_valid else math.inf
    rng = np.random.default_rng(config.seed)
    all_rows = np.arange(n)
    unit = np.ones(n)

    for iteration in range(1, config.num_iterations + 1):
        gradients = pinball_gradients(train_pred, y_train, tau)
        if config.goss is not None:
            rows, w = goss_sample(
                gradients,
                config.goss.top_fraction,
                config.goss.rest_fraction,
                int(rng.integers(0, 2**63 - 1)),
            )
            weights = np.zeros(n)
            weights[rows] = w
        else:
            rows, weights = all_rows, unit

        tree = TreeGrower(binned, mapper, gradients, weights, rows, config).grow()
        if tree.n_leaves == 1:
            logger.info(f"Stopping at round {iteration}: no leaf can be split")
            break

        leaf_of = tree.apply_binned(binned)
        _renew_leaves(tree, leaf_of, y_train - train_pred, tau)
        train_pred += config.learning_rate * tree.value[leaf_of]
        model.trees.append(tree)
        model.train_scores.append(mean_quantile_score(train_pred, y_train, tau))

        if not use_valid:
            model.best_iteration = iteration
            continue

        valid_pred += config.learning_rate * tree.predict(X_valid)
        score = mean_quantile_score(valid_pred, y_valid, tau)
        model.valid_scores.append(score)
        logger.debug(f"round {iteration}: valid score {score:.6g}")
        if score < best_score:
            best_score = score
            model.best_iteration = iteration
        elif (
            config.early_stopping_round > 0
            and iteration - model.best_iteration >= config.early_stopping_round
        ):
            logger.info(
                f"Early stopping at round {iteration}, "
                f"best iteration {model.best_iteration}"
            )
            break

    logger.info(
        f"Trained {len(model.trees)} trees at tau={tau}, "
        f"best iteration {model.best_iteration}"
    )
    return model


def predict_raw(model: GBDTModel, features) -> Union[float, np.ndarray]:
    """
    Unclipped prediction of a fitted model.

    Args:
        model: Fitted GBDTModel
        features: One feature vector (FeatureVector or 1-D array) or a matrix

    Returns:
        Float for one vector, array for a matrix
    """
    if hasattr(features, "to_array"):
        features = features.to_array()
    arr = np.asarray(features, dtype=np.float64)
    out = model.predict(arr)
    return float(out[0]) if arr.ndim == 1 else out


def save_gbdt(model: GBDTModel, path: Union[str, Path]) -> None:
    """Write a model as JSON; floats round-trip exactly."""
    payload = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": model.config.model_dump() if model.config else None,
        "base_score": model.base_score,
        "learning_rate": model.learning_rate,
        "tau": model.tau,
        "feature_count": model.feature_count,
        "best_iteration": model.best_iteration,
        "train_scores": model.train_scores,
        "valid_scores": model.valid_scores,
        "trees": [tree.to_dict() for tree in model.trees],
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_gbdt(path: Union[str, Path]) -> GBDTModel:
    """Read a model written by ``save_gbdt``."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != FORMAT_NAME:
        raise DataError(f"{path} is not a boosted-tree model file")
    if payload.get("version") != FORMAT_VERSION:
        raise DataError(f"unsupported model version {payload.get('version')}")
    config = payload.get("config")
    return GBDTModel(
        base_score=payload["base_score"],
        trees=[TreeStructure.from_dict(t) for t in payload["trees"]],
        learning_rate=payload["learning_rate"],
        tau=payload["tau"],
        feature_count=payload["feature_count"],
        best_iteration=payload["best_iteration"],
        config=GBDTConfig(**config) if config else None,
        train_scores=payload.get("train_scores", []),
        valid_scores=payload.get("valid_scores", []),
    )
