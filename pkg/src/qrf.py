"""
Quantile regression forests.

Bagged regression trees whose leaves keep the indices of the training
samples routed to them. A query's conditional distribution is the
weighted empirical CDF of the training targets, where each tree gives
weight 1/|leaf| to the members of the query's leaf and the trees are
averaged. Quantiles invert that CDF with the infimum convention, so every
prediction is one of the training targets.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field

from src.config import derive_seed
from src.errors import DataError
from src.scoring import as_tau
from src.tree import BinMapper, TreeBuilder, TreeStructure, check_features

# Configure logger
logger = logging.getLogger(__name__)

FORMAT_NAME = "quantmerge-qrf"
FORMAT_VERSION = 1

# Cumulative weights within this distance below tau count as reaching it
CDF_TOLERANCE = 1e-12

# Queries per block in batch prediction
PREDICT_CHUNK = 256

# Histogram cells (nodes x mtry x bins) evaluated per split-search block
HISTOGRAM_BUDGET = 1 << 22


class LeafMembership(str, Enum):
    """Which training samples populate the leaves after growth."""

    ALL = "all"
    INBAG = "inbag"


class QRFConfig(BaseModel):
    """
    Forest hyperparameters.

    Attributes:
        n_trees: Number of trees
        mtry: Features drawn without replacement at every node
        min_node_size: Minimum bootstrap samples per child; nodes with
            fewer than twice this many are not split
        n_bins: Histogram bins per feature for split search
        bootstrap: Grow each tree on a bootstrap resample
        leaf_membership: Fill leaves with all training samples or only the
            tree's in-bag samples
        seed: Master seed; tree t uses derive_seed(seed, "qrf", t)
    """

    model_config = ConfigDict(frozen=True)

    n_trees: int = Field(default=100, ge=1)
    mtry: int = Field(default=4, ge=1)
    min_node_size: int = Field(default=5, ge=1)
    n_bins: int = Field(default=255, ge=2, le=256)
    bootstrap: bool = True
    leaf_membership: LeafMembership = LeafMembership.ALL
    seed: int = Field(default=0, ge=0)


@dataclass
class ForestTree:
    """
    One tree of the forest and its leaf membership in CSR form.

    Members of the leaf with slot s are ``members[offsets[s]:offsets[s + 1]]``;
    ``slot_of_node`` maps a node index to its slot (-1 for internal nodes).
    """

    structure: TreeStructure
    slot_of_node: np.ndarray
    offsets: np.ndarray
    members: np.ndarray

    def leaf_members(self, node: int) -> np.ndarray:
        slot = self.slot_of_node[node]
        return self.members[self.offsets[slot] : self.offsets[slot + 1]]


@dataclass
class QRFModel:
    """Fitted forest with the training targets it weights."""

    trees: List[ForestTree]
    targets: np.ndarray
    feature_count: int
    config: QRFConfig

    @property
    def n_train(self) -> int:
        return int(self.targets.size)


@dataclass
class WeightedCDF:
    """Discrete distribution on sorted support values."""

    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.support.shape != self.weights.shape or self.support.size == 0:
            raise DataError("support and weights must be non-empty and aligned")
        if np.any(np.diff(self.support) < 0):
            raise DataError("support must be sorted ascending")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise DataError("weights must be nonnegative and sum to 1")

    @classmethod
    def from_weights(cls, values: np.ndarray, weights: np.ndarray) -> "WeightedCDF":
        """Build from unsorted values, dropping zero weights."""
        keep = weights > 0
        values, weights = values[keep], weights[keep]
        order = np.argsort(values, kind="stable")
        return cls(values[order], weights[order])

    def cdf(self, y: float) -> float:
        return float(self.weights[self.support <= y].sum())

    def quantile(self, tau: float) -> float:
        """Smallest support value whose cumulative weight reaches tau."""
        cumulative = np.cumsum(self.weights)
        index = int(np.argmax(cumulative >= tau - CDF_TOLERANCE))
        return float(self.support[index])

    def mean(self) -> float:
        return float(np.dot(self.support, self.weights))


def _candidate_features(rng: np.random.Generator, k: int, p: int, mtry: int):
    # Row-wise random permutation prefixes, sorted so ties favor low indices
    draws = np.argsort(rng.random((k, p)), axis=1)[:, :mtry]
    return np.sort(draws, axis=1)


@dataclass
class _LevelSplits:
    """Best split of every frontier node; feature -1 where none is taken."""

    feature: np.ndarray
    bin_index: np.ndarray
    n_left: np.ndarray
    left_sum: np.ndarray


def _best_splits(
    binned_rows: np.ndarray,
    row_y: np.ndarray,
    pos: np.ndarray,
    slots: np.ndarray,
    candidates: np.ndarray,
    count: np.ndarray,
    total: np.ndarray,
    sse: np.ndarray,
    splits: _LevelSplits,
    n_bins: int,
    min_node_size: int,
) -> None:
    """Histogram split search for the frontier nodes in ``slots``."""
    k = slots.size
    mtry = candidates.shape[1]
    local_of_slot = np.full(count.size, -1, dtype=np.intp)
    local_of_slot[slots] = np.arange(k)
    local = local_of_slot[pos]
    keep = local >= 0
    local, xb, yv = local[keep], binned_rows[keep], row_y[keep]

    feats = candidates[slots][local]
    bins = np.take_along_axis(xb, feats, axis=1).astype(np.intp)
    keys = ((local[:, None] * mtry + np.arange(mtry)) * n_bins + bins).ravel()
    size = k * mtry * n_bins
    c_hist = np.bincount(keys, minlength=size).reshape(k, mtry, n_bins)
    s_hist = np.bincount(keys, weights=np.repeat(yv, mtry), minlength=size).reshape(
        k, mtry, n_bins
    )

    n_node = count[slots][:, None, None]
    s_node = total[slots][:, None, None]
    cl = np.cumsum(c_hist, axis=2)[:, :, :-1]
    sl = np.cumsum(s_hist, axis=2)[:, :, :-1]
    cr, sr = n_node - cl, s_node - sl
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = sl**2 / cl + sr**2 / cr - s_node**2 / n_node
    gain = np.where((cl >= min_node_size) & (cr >= min_node_size), gain, -np.inf)
    gain = gain.reshape(k, -1)

    best = np.argmax(gain, axis=1)
    rows = np.arange(k)
    best_gain = gain[rows, best]
    accept = np.isfinite(best_gain) & (best_gain > 1e-10 * sse[slots] + 1e-12)
    j, b = np.divmod(best, n_bins - 1)

    chosen = slots[accept]
    splits.feature[chosen] = candidates[chosen, j[accept]]
    splits.bin_index[chosen] = b[accept]
    splits.n_left[chosen] = cl[rows, j, b][accept]
    splits.left_sum[chosen] = sl[rows, j, b][accept]


def grow_tree(
    binned: np.ndarray,
    y: np.ndarray,
    mapper: BinMapper,
    config: QRFConfig,
    seed: int,
) -> ForestTree:
    """
    Grow one variance-reduction tree, level by level, and fill its leaves.

    Args:
        binned: Binned training features (n, p)
        y: Training targets
        mapper: Bin thresholds for ``binned``
        config: Forest hyperparameters
        seed: Seed for the bootstrap and the feature draws

    Returns:
        ForestTree with leaf membership
    """
    n, p = binned.shape
    nb = config.n_bins
    mtry = min(config.mtry, p)
    mns = config.min_node_size
    rng = np.random.default_rng(seed)

    rows = rng.integers(0, n, size=n) if config.bootstrap else np.arange(n)
    builder = TreeBuilder()
    root = builder.add_node(count=rows.size, depth=0, value=float(y[rows].mean()))
    frontier = np.array([root])
    # Frontier slot of every active bootstrap row
    position = np.zeros(rows.size, dtype=np.intp)
    nodes_per_block = max(1, HISTOGRAM_BUDGET // (mtry * nb))

    while frontier.size:
        k = frontier.size
        r = np.flatnonzero(position >= 0)
        r = r[np.argsort(position[r], kind="stable")]
        pos = position[r]
        row_y = y[rows[r]]

        count = np.bincount(pos, minlength=k)
        total = np.bincount(pos, weights=row_y, minlength=k)
        total_sq = np.bincount(pos, weights=row_y**2, minlength=k)
        low = np.full(k, np.inf)
        high = np.full(k, -np.inf)
        np.minimum.at(low, pos, row_y)
        np.maximum.at(high, pos, row_y)
        sse = np.maximum(total_sq - total**2 / count, 0.0)
        candidates = _candidate_features(rng, k, p, mtry)

        splits = _LevelSplits(
            feature=np.full(k, -1, dtype=np.intp),
            bin_index=np.zeros(k, dtype=np.intp),
            n_left=np.zeros(k, dtype=np.int64),
            left_sum=np.zeros(k),
        )
        splittable = np.flatnonzero((count >= 2 * mns) & (high > low))
        for begin in range(0, splittable.size, nodes_per_block):
            slots = splittable[begin : begin + nodes_per_block]
            lo, hi = np.searchsorted(pos, [slots[0], slots[-1] + 1])
            _best_splits(
                binned[rows[r[lo:hi]]],
                row_y[lo:hi],
                pos[lo:hi],
                slots,
                candidates,
                count,
                total,
                sse,
                splits,
                nb,
                mns,
            )

        child_slot = np.full((k, 2), -1, dtype=np.intp)
        next_frontier = []
        for slot in np.flatnonzero(splits.feature >= 0):
            feature = int(splits.feature[slot])
            b = int(splits.bin_index[slot])
            n_left = int(splits.n_left[slot])
            n_right = int(count[slot]) - n_left
            left, right = builder.split(
                int(frontier[slot]),
                feature,
                b,
                mapper.threshold(feature, b),
                n_left,
                n_right,
            )
            builder.value[left] = float(splits.left_sum[slot] / n_left)
            right_sum = total[slot] - splits.left_sum[slot]
            builder.value[right] = float(right_sum / n_right)
            child_slot[slot] = (len(next_frontier), len(next_frontier) + 1)
            next_frontier.extend([left, right])

        # Rows of nodes that became leaves leave the frontier
        feature = splits.feature[pos]
        moving = feature >= 0
        position[r[~moving]] = -1
        mpos = pos[moving]
        goes_left = (
            binned[rows[r[moving]], feature[moving]] <= splits.bin_index[mpos]
        )
        position[r[moving]] = np.where(
            goes_left, child_slot[mpos, 0], child_slot[mpos, 1]
        )
        frontier = np.array(next_frontier, dtype=np.intp)

    structure = builder.build()
    if config.leaf_membership == LeafMembership.ALL:
        sample_ids = np.arange(n)
    else:
        sample_ids = np.sort(rows)
    leaf_of = structure.apply_binned(binned[sample_ids])
    return _with_membership(structure, leaf_of, sample_ids)


def _with_membership(
    structure: TreeStructure, leaf_of: np.ndarray, sample_ids: np.ndarray
) -> ForestTree:
    leaves = structure.leaves
    slot_of_node = np.full(structure.n_nodes, -1, dtype=np.intp)
    slot_of_node[leaves] = np.arange(leaves.size)
    slots = slot_of_node[leaf_of]
    order = np.argsort(slots, kind="stable")
    sizes = np.bincount(slots, minlength=leaves.size)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    return ForestTree(
        structure=structure,
        slot_of_node=slot_of_node,
        offsets=offsets,
        members=sample_ids[order].astype(np.int64),
    )


def fit_qrf(
    X: np.ndarray, y: np.ndarray, config: QRFConfig, n_jobs: int = 1
) -> QRFModel:
    """
    Fit a quantile regression forest.

    Args:
        X: Training features (n, p)
        y: Training targets
        config: Forest hyperparameters
        n_jobs: Parallel tree builders; results do not depend on it

    Returns:
        Fitted QRFModel
    """
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise DataError("training set is empty")
    X = check_features(X, np.shape(X)[-1])
    if X.shape[0] != y.size:
        raise DataError("training features and targets differ in length")
    if not np.all(np.isfinite(y)):
        raise DataError("training targets must be finite")
    if config.mtry > X.shape[1]:
        raise DataError(f"mtry={config.mtry} exceeds feature count {X.shape[1]}")

    mapper = BinMapper(config.n_bins).fit(X)
    binned = mapper.transform(X)
    trees = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(grow_tree)(
            binned, y, mapper, config, derive_seed(config.seed, "qrf", t)
        )
        for t in range(config.n_trees)
    )
    logger.info(
        f"Grew {config.n_trees} trees on {y.size} samples "
        f"({sum(t.structure.n_leaves for t in trees)} leaves)"
    )
    return QRFModel(trees=trees, targets=y, feature_count=X.shape[1], config=config)


def _as_matrix(model: QRFModel, x) -> np.ndarray:
    if hasattr(x, "to_array"):
        x = x.to_array()
    return check_features(x, model.feature_count)


def qrf_weights(model: QRFModel, x) -> np.ndarray:
    """
    Weights of the training samples for one query.

    Args:
        model: Fitted forest
        x: One feature vector

    Returns:
        Array of length n_train summing to 1
    """
    row = _as_matrix(model, x)
    if row.shape[0] != 1:
        raise DataError("qrf_weights takes a single feature vector")
    weights = np.zeros(model.n_train)
    for tree in model.trees:
        node = int(tree.structure.apply(row)[0])
        members = tree.leaf_members(node)
        np.add.at(weights, members, 1.0 / members.size)
    return weights / len(model.trees)


def conditional_cdf(model: QRFModel, x) -> WeightedCDF:
    """Weighted empirical CDF of the training targets at ``x``."""
    weights = qrf_weights(model, x)
    return WeightedCDF.from_weights(model.targets, weights)


def predict_quantile(model: QRFModel, x, tau: float) -> float:
    """Conditional tau-quantile at one feature vector."""
    return conditional_cdf(model, x).quantile(as_tau(tau))


def predict_mean(model: QRFModel, X) -> np.ndarray:
    """Weighted mean of the training targets for every query row."""
    X = _as_matrix(model, X)
    out = np.zeros(X.shape[0])
    for tree in model.trees:
        nodes = tree.structure.apply(X)
        slots = tree.slot_of_node[nodes]
        sums = np.add.reduceat(
            model.targets[tree.members], tree.offsets[:-1]
        ) / np.diff(tree.offsets)
        out += sums[slots]
    return out / len(model.trees)


def predict_quantiles(model: QRFModel, X, taus: Sequence[float]) -> np.ndarray:
    """
    Conditional quantiles for many queries and levels.

    Args:
        model: Fitted forest
        X: Query features (m, p)
        taus: Quantile levels

    Returns:
        Array of shape (m, len(taus))
    """
    X = _as_matrix(model, X)
    levels = np.array([as_tau(t) for t in taus])
    n = model.n_train
    n_trees = len(model.trees)

    order = np.argsort(model.targets, kind="stable")
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    sorted_targets = model.targets[order]

    # Per tree: leaf start, leaf size, member ranks
    starts = np.empty((X.shape[0], n_trees), dtype=np.int64)
    sizes = np.empty((X.shape[0], n_trees), dtype=np.int64)
    member_ranks = []
    shift = 0
    for t, tree in enumerate(model.trees):
        slots = tree.slot_of_node[tree.structure.apply(X)]
        starts[:, t] = tree.offsets[slots] + shift
        sizes[:, t] = np.diff(tree.offsets)[slots]
        member_ranks.append(rank[tree.members])
        shift += tree.members.size
    member_ranks = np.concatenate(member_ranks)

    out = np.empty((X.shape[0], levels.size))
    for begin in range(0, X.shape[0], PREDICT_CHUNK):
        block = slice(begin, begin + PREDICT_CHUNK)
        out[block] = _block_quantiles(
            starts[block],
            sizes[block],
            member_ranks,
            n,
            n_trees,
            sorted_targets,
            levels,
        )
    return out


def _block_quantiles(
    starts, sizes, member_ranks, n, n_trees, sorted_targets, levels
) -> np.ndarray:
    m = starts.shape[0]
    lens = sizes.ravel()
    total = int(lens.sum())
    # Gather positions of every (query, tree) leaf slice
    first = np.repeat(starts.ravel() - np.cumsum(lens) + lens, lens)
    positions = first + np.arange(total)
    weights = np.repeat(1.0 / (n_trees * lens), lens)
    query = np.repeat(np.repeat(np.arange(m), n_trees), lens)

    ranks = member_ranks[positions]
    order = np.lexsort((ranks, query))
    query, ranks, weights = query[order], ranks[order], weights[order]

    per_query = np.bincount(query, minlength=m)
    group_start = np.concatenate([[0], np.cumsum(per_query)[:-1]])
    column = np.arange(total) - group_start[query]
    width = int(per_query.max())

    grid_w = np.zeros((m, width))
    grid_w[query, column] = weights
    grid_r = np.full((m, width), n - 1, dtype=np.int64)
    grid_r[query, column] = ranks
    cumulative = np.cumsum(grid_w, axis=1)

    out = np.empty((m, levels.size))
    for i, tau in enumerate(levels):
        index = np.argmax(cumulative >= tau - CDF_TOLERANCE, axis=1)
        out[:, i] = sorted_targets[grid_r[np.arange(m), index]]
    return out


def save_qrf(model: QRFModel, path: Union[str, Path]) -> None:
    """Write a forest, its leaf membership and targets as JSON."""
    payload = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": model.config.model_dump(mode="json"),
        "feature_count": model.feature_count,
        "targets": model.targets.tolist(),
        "trees": [
            {
                **tree.structure.to_dict(),
                "offsets": tree.offsets.tolist(),
                "members": tree.members.tolist(),
            }
            for tree in model.trees
        ],
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_qrf(path: Union[str, Path]) -> QRFModel:
    """Read a forest written by ``save_qrf``."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != FORMAT_NAME:
        raise DataError(f"{path} is not a forest model file")
    if payload.get("version") != FORMAT_VERSION:
        raise DataError(f"unsupported model version {payload.get('version')}")

    trees = []
    for data in payload["trees"]:
        structure = TreeStructure.from_dict(data)
        leaves = structure.leaves
        slot_of_node = np.full(structure.n_nodes, -1, dtype=np.intp)
        slot_of_node[leaves] = np.arange(leaves.size)
        trees.append(
            ForestTree(
                structure=structure,
                slot_of_node=slot_of_node,
                offsets=np.asarray(data["offsets"], dtype=np.int64),
                members=np.asarray(data["members"], dtype=np.int64),
            )
        )
    return QRFModel(
        trees=trees,
        targets=np.asarray(payload["targets"], dtype=np.float64),
        feature_count=payload["feature_count"],
        config=QRFConfig(**payload["config"]),
    )

