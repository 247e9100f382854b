"""Shared tree-growing machinery for the forest estimators."""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from django.conf import settings
from tqdm import tqdm

from effects.exceptions import DataValidationError, EstimationError
from effects.services.rng_service import derive_seed, draw_seed

logger = logging.getLogger(__name__)

# Relative tolerance for treating two split gains as tied.
TIE_TOLERANCE = 1e-12
# A split must beat this fraction of mean(rho^2) to count as a positive gain.
MIN_GAIN_RATIO = 1e-12


@dataclass(frozen=True)
class ForestConfig:
    """Tunables shared by gradient and regression forests."""
    num_trees: int = 500
    sample_fraction: float = 0.5
    honesty: bool = True
    honesty_fraction: float = 0.5
    min_leaf_size: int = 5
    max_depth: Optional[int] = None
    mtry: Optional[int] = None

    def __post_init__(self):
        if self.num_trees < 1:
            raise DataValidationError("num_trees must be at least 1")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise DataValidationError("sample_fraction must lie in (0, 1]")
        if not 0.0 < self.honesty_fraction < 1.0:
            raise DataValidationError("honesty_fraction must lie in (0, 1)")
        if self.min_leaf_size < 1:
            raise DataValidationError("min_leaf_size must be at least 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise DataValidationError("max_depth must be nonnegative")


def default_mtry(p: int) -> int:
    """ceil(sqrt(p) + 20% of p), capped at p."""
    return max(1, min(p, int(math.ceil(math.sqrt(p) + 0.2 * p))))


@dataclass(eq=False)
class DecisionTree:
    """
    A fitted binary tree stored as parallel node arrays.

    Internal nodes send a row left iff its value is <= threshold. Leaves hold
    the estimation-set indices routed to them. Root depth is 1.
    """
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    depth: np.ndarray
    leaf_members: Dict[int, np.ndarray]
    grow_indices: np.ndarray
    estimate_indices: np.ndarray
    n_features: int
    degenerate_nodes: Tuple[int, ...] = ()

    root = 0

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    def is_leaf(self, node: int) -> bool:
        return bool(self.feature[node] < 0)

    def leaves(self) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.feature < 0)]

    def apply(self, features: np.ndarray) -> np.ndarray:
        """Leaf node id for every row of features."""
        features = np.asarray(features, dtype=float)
        if features.ndim == 1:
            features = features.reshape(1, -1)
        if features.shape[1] != self.n_features:
            raise DataValidationError(
                f"expected {self.n_features} covariates, got {features.shape[1]}"
            )
        node = np.zeros(features.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            current = node[rows]
            go_left = features[rows, self.feature[current]] <= self.threshold[current]
            node[rows] = np.where(go_left, self.left[current], self.right[current])
            active = self.feature[node] >= 0
        return node

    def leaf_for(self, x: np.ndarray) -> int:
        return int(self.apply(np.asarray(x, dtype=float).reshape(1, -1))[0])

    def split_counts_by_depth(self) -> List[Tuple[int, int]]:
        """(depth, feature) for every internal node."""
        internal = np.flatnonzero(self.feature >= 0)
        return [(int(self.depth[i]), int(self.feature[i])) for i in internal]

    def to_dict(self) -> Dict[str, Any]:
        nodes = []
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                nodes.append({
                    "id": i,
                    "depth": int(self.depth[i]),
                    "feature": int(self.feature[i]),
                    "threshold": float(self.threshold[i]),
                    "left": int(self.left[i]),
                    "right": int(self.right[i]),
                })
            else:
                nodes.append({
                    "id": i,
                    "depth": int(self.depth[i]),
                    "members": [int(m) for m in self.leaf_members.get(i, [])],
                })
        return {"nodes": nodes, "degenerate_nodes": list(self.degenerate_nodes)}


@dataclass(frozen=True)
class HonestPartition:
    grow_indices: np.ndarray
    estimate_indices: np.ndarray


@dataclass(frozen=True)
class KernelWeights:
    x: np.ndarray
    weights: np.ndarray
    contributing_trees: int


def honest_partition(indices: Sequence[int], fraction: float, rng: np.random.Generator) -> HonestPartition:
    """
    Split indices into disjoint grow / estimate sets.

    The grow set gets floor(fraction * |indices|) units chosen uniformly at
    random; the rest go to the estimate set.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if not 0.0 < fraction < 1.0:
        raise DataValidationError(f"honesty fraction must lie in (0, 1), got {fraction}")
    if indices.size < 2:
        raise DataValidationError("honest partition needs at least 2 units")
    n_grow = int(math.floor(fraction * indices.size))
    if n_grow < 1 or indices.size - n_grow < 1:
        raise DataValidationError("honest partition leaves a side without units")
    shuffled = rng.permutation(indices)
    return HonestPartition(
        grow_indices=np.sort(shuffled[:n_grow]),
        estimate_indices=np.sort(shuffled[n_grow:]),
    )


def split_gain(rho: np.ndarray, left: Sequence[int], right: Sequence[int]) -> float:
    """
    Gradient split criterion (n_l * n_r / n_p^2) * (mean_l - mean_r)^2.

    Args:
        rho: pseudo-outcomes for the parent's members
        left, right: positions into rho for the two children
    """
    rho = np.asarray(rho, dtype=float)
    left = np.asarray(left, dtype=np.int64)
    right = np.asarray(right, dtype=np.int64)
    if left.size == 0 or right.size == 0:
        raise DataValidationError("split children must be nonempty")
    n_left, n_right = left.size, right.size
    n_parent = n_left + n_right
    diff = rho[left].mean() - rho[right].mean()
    return float(n_left * n_right / (n_parent * n_parent) * diff * diff)


def _best_split(
    node_features: np.ndarray,
    rho: np.ndarray,
    candidates: Sequence[int],
    min_leaf: int,
    estimate_features: Optional[np.ndarray] = None,
) -> Optional[Tuple[int, float, float]]:
    """
    Exhaustive midpoint search maximising the gradient criterion.

    Ties go to the lowest covariate index, then the lowest threshold. When
    estimate_features is given both children must also hold min_leaf
    estimation units.
    """
    n = rho.shape[0]
    floor = MIN_GAIN_RATIO * float(np.mean(rho * rho))
    best: Optional[Tuple[int, float, float]] = None
    best_gain = 0.0

    for f in sorted(int(c) for c in candidates):
        x = node_features[:, f]
        order = np.argsort(x, kind="stable")
        xs = x[order]
        cs = np.cumsum(rho[order])
        total = cs[-1]

        k = np.arange(1, n)
        valid = (xs[1:] > xs[:-1]) & (k >= min_leaf) & (n - k >= min_leaf)
        if not valid.any():
            continue
        k = k[valid]
        thresholds = 0.5 * (xs[k - 1] + xs[k])
        left_sum = cs[k - 1]
        diff = left_sum / k - (total - left_sum) / (n - k)
        gains = k * (n - k) / float(n * n) * diff * diff

        if estimate_features is not None:
            est = np.sort(estimate_features[:, f])
            est_left = np.searchsorted(est, thresholds, side="right")
            ok = (est_left >= min_leaf) & (est.size - est_left >= min_leaf)
            if not ok.any():
                continue
            gains = np.where(ok, gains, -np.inf)

        top = float(gains.max())
        tol = TIE_TOLERANCE * max(abs(top), floor)
        i = int(np.flatnonzero(gains >= top - tol)[0])
        gain = float(gains[i])
        if gain <= floor:
            continue
        if best is None or gain > best_gain + TIE_TOLERANCE * max(abs(best_gain), floor):
            best = (f, float(thresholds[i]), gain)
            best_gain = gain

    return best


NodeTarget = Callable[[np.ndarray], Optional[np.ndarray]]


def _build_tree(
    features: np.ndarray,
    grow_indices: np.ndarray,
    estimate_indices: np.ndarray,
    node_target: NodeTarget,
    min_leaf: int,
    max_depth: Optional[int],
    mtry: Optional[int],
    rng: np.random.Generator,
    honest: bool,
) -> DecisionTree:
    """
    Greedy recursive partitioning on the grow set, leaves populated from the
    estimate set.

    node_target returns the values to split on for a node's grow members, or
    None when the node is degenerate and must stay a leaf.
    """
    p = features.shape[1]
    mtry = p if mtry is None else max(1, min(p, mtry))

    feature: List[int] = [-1]
    threshold: List[float] = [0.0]
    left: List[int] = [-1]
    right: List[int] = [-1]
    depth: List[int] = [1]
    degenerate: List[int] = []

    stack = [(0, grow_indices, estimate_indices)]
    while stack:
        node, grow, estimate = stack.pop()
        if max_depth is not None and depth[node] > max_depth:
            continue
        if grow.size < 2 * min_leaf:
            continue
        if honest and estimate.size < 2 * min_leaf:
            continue
        rho = node_target(grow)
        if rho is None:
            degenerate.append(node)
            continue
        if mtry < p:
            candidates = rng.choice(p, size=mtry, replace=False)
        else:
            candidates = range(p)
        split = _best_split(
            features[grow],
            rho,
            candidates,
            min_leaf,
            features[estimate] if honest else None,
        )
        if split is None:
            continue

        f, t, _ = split
        feature[node] = f
        threshold[node] = t
        for _side in range(2):
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            depth.append(depth[node] + 1)
        left[node] = len(feature) - 2
        right[node] = len(feature) - 1

        grow_left = features[grow, f] <= t
        est_left = features[estimate, f] <= t
        stack.append((right[node], grow[~grow_left], estimate[~est_left]))
        stack.append((left[node], grow[grow_left], estimate[est_left]))

    tree = DecisionTree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        depth=np.asarray(depth, dtype=np.int64),
        leaf_members={},
        grow_indices=np.asarray(grow_indices, dtype=np.int64),
        estimate_indices=np.asarray(estimate_indices, dtype=np.int64),
        n_features=p,
        degenerate_nodes=tuple(degenerate),
    )
    routed = tree.apply(features[estimate_indices]) if estimate_indices.size else np.empty(0, dtype=np.int64)
    for leaf in tree.leaves():
        tree.leaf_members[leaf] = np.asarray(estimate_indices[routed == leaf], dtype=np.int64)
    return tree


def grow_gradient_tree(
    features: np.ndarray,
    y_tilde: np.ndarray,
    z_tilde: np.ndarray,
    grow_indices: Sequence[int],
    estimate_indices: Sequence[int],
    config: ForestConfig,
    rng: np.random.Generator,
) -> DecisionTree:
    """
    Grow one causal gradient tree on centered outcome / exposure residuals.

    Each node fits theta_P = sum(Z~ Y~) / sum(Z~^2) on its grow members and
    splits on the pseudo-outcomes rho_i = Z~_i (Y~_i - theta_P Z~_i) / A_P,
    A_P = mean(Z~^2). Leaves are populated with the estimate set only.
    """
    features = np.asarray(features, dtype=float)
    y_tilde = np.asarray(y_tilde, dtype=float)
    z_tilde = np.asarray(z_tilde, dtype=float)
    grow_indices = np.asarray(grow_indices, dtype=np.int64)
    estimate_indices = np.asarray(estimate_indices, dtype=np.int64)
    if grow_indices.size == 0:
        raise DataValidationError("gradient tree needs a nonempty grow set")
    if estimate_indices.size == 0:
        raise DataValidationError("gradient tree needs a nonempty estimate set")

    def node_target(members: np.ndarray) -> Optional[np.ndarray]:
        zt = z_tilde[members]
        yt = y_tilde[members]
        zz = float(np.dot(zt, zt))
        if zz <= 0.0:
            return None
        a_p = zz / members.size
        theta = float(np.dot(zt, yt)) / zz
        resid = yt - theta * zt
        # an exact linear fit leaves only rounding noise to split on
        if np.max(np.abs(resid)) <= TIE_TOLERANCE * max(1.0, float(np.max(np.abs(yt)))):
            return np.zeros_like(zt)
        return zt * resid / a_p

    tree = _build_tree(
        features,
        grow_indices,
        estimate_indices,
        node_target,
        config.min_leaf_size,
        config.max_depth,
        config.mtry if config.mtry is not None else default_mtry(features.shape[1]),
        rng,
        honest=True,
    )
    if tree.degenerate_nodes:
        logger.warning(f"Gradient tree kept {len(tree.degenerate_nodes)} degenerate node(s) as leaves (no exposure variation)")
    return tree


def forest_weights(
    trees: Sequence[DecisionTree],
    x: np.ndarray,
    n_units: int,
    tree_mask: Optional[np.ndarray] = None,
) -> KernelWeights:
    """
    Leaf co-residence weights alpha_i(x) averaged over the forest.

    Trees whose leaf at x is empty (or that tree_mask excludes) contribute
    nothing and the average is taken over the remaining trees.
    """
    if not trees:
        raise DataValidationError("forest must contain at least one tree")
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != trees[0].n_features:
        raise DataValidationError(
            f"target point has {x.shape[0]} covariates, forest expects {trees[0].n_features}"
        )

    weights = np.zeros(n_units, dtype=float)
    contributing = 0
    for b, tree in enumerate(trees):
        if tree_mask is not None and not tree_mask[b]:
            continue
        members = tree.leaf_members.get(tree.leaf_for(x))
        if members is None or members.size == 0:
            continue
        weights[members] += 1.0 / members.size
        contributing += 1
    if contributing == 0:
        raise EstimationError("no tree has a nonempty leaf at the target point")
    weights /= contributing
    return KernelWeights(x=x, weights=weights, contributing_trees=contributing)


def build_trees(build_one: Callable[[int], Any], num_trees: int, desc: str) -> List[Any]:
    """
    Run build_one(b) for b in range(num_trees), in a thread pool when
    EMM_MAX_WORKERS > 1. Results keep tree order.
    """
    workers = max(1, int(getattr(settings, "EMM_MAX_WORKERS", 1)))
    show = bool(getattr(settings, "EMM_SHOW_PROGRESS", False))
    if workers == 1 or num_trees == 1:
        return [build_one(b) for b in tqdm(range(num_trees), desc=desc, disable=not show)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(tqdm(pool.map(build_one, range(num_trees)), total=num_trees, desc=desc, disable=not show))


def subsample(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted subsample without replacement of floor(fraction * n) units (at least 2)."""
    size = min(n, max(2, int(math.floor(fraction * n))))
    return np.sort(rng.choice(n, size=size, replace=False))


@dataclass(eq=False)
class RegressionForest:
    """Bagged regression trees with their in-bag bookkeeping."""
    trees: List[DecisionTree]
    leaf_values: List[np.ndarray]
    inbag: np.ndarray
    oob_predictions: np.ndarray
    fallback_units: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


def forest_oob_predict(forest: RegressionForest, features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Out-of-bag predictions for the training rows.

    Unit i averages the trees whose replicate excluded i; units in-bag for
    every tree fall back to the full forest and are returned as flagged.
    """
    features = np.asarray(features, dtype=float)
    n = features.shape[0]
    sums = np.zeros(n)
    counts = np.zeros(n)
    full_sums = np.zeros(n)
    for b, tree in enumerate(forest.trees):
        values = forest.leaf_values[b][tree.apply(features)]
        out = ~forest.inbag[b]
        sums[out] += values[out]
        counts[out] += 1
        full_sums += values
    fallback = counts == 0
    predictions = np.empty(n)
    predictions[~fallback] = sums[~fallback] / counts[~fallback]
    predictions[fallback] = full_sums[fallback] / len(forest.trees)
    return predictions, np.flatnonzero(fallback)


def regression_forest_oob(
    features: np.ndarray,
    target: np.ndarray,
    config: ForestConfig,
    rng: np.random.Generator,
    clip: Optional[Tuple[float, float]] = None,
    desc: str = "regression forest",
) -> RegressionForest:
    """
    Fit a variance-reduction regression forest and return its OOB predictions.

    Args:
        features: n x p covariates
        target: length-n response
        config: forest tunables (honesty is ignored; leaves use in-bag units)
        rng: source of the forest's base seed
        clip: optional (low, high) bounds applied to the predictions
    """
    features = np.asarray(features, dtype=float)
    target = np.asarray(target, dtype=float)
    n, p = features.shape
    if n < 10:
        raise DataValidationError(f"regression forest needs at least 10 units, got {n}")
    base_seed = draw_seed(rng)
    mtry = config.mtry if config.mtry is not None else default_mtry(p)

    def node_target(members: np.ndarray) -> np.ndarray:
        return target[members]

    def build_one(b: int) -> Tuple[DecisionTree, np.ndarray, np.ndarray]:
        tree_rng = np.random.default_rng(derive_seed(base_seed, b))
        sample = subsample(n, config.sample_fraction, tree_rng)
        tree = _build_tree(
            features, sample, sample, node_target,
            config.min_leaf_size, config.max_depth, mtry, tree_rng, honest=False,
        )
        values = np.full(tree.n_nodes, np.nan)
        for leaf, members in tree.leaf_members.items():
            if members.size:
                values[leaf] = target[members].mean()
        return tree, values, sample

    built = build_trees(build_one, config.num_trees, desc)
    inbag = np.zeros((config.num_trees, n), dtype=bool)
    for b, (_, _, sample) in enumerate(built):
        inbag[b, sample] = True

    forest = RegressionForest(
        trees=[t for t, _, _ in built],
        leaf_values=[v for _, v, _ in built],
        inbag=inbag,
        oob_predictions=np.empty(0),
    )
    predictions, fallback = forest_oob_predict(forest, features)
    if fallback.size:
        logger.warning(f"{fallback.size} unit(s) were in-bag for every tree; using full-forest predictions")
    if clip is not None:
        predictions = np.clip(predictions, clip[0], clip[1])
    forest.oob_predictions = predictions
    forest.fallback_units = fallback
    return forest
