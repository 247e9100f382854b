"""Bayesian additive regression trees: priors, tree moves and the backfitting sampler."""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from django.conf import settings
from scipy import stats
from tqdm import tqdm

from effects.exceptions import DataValidationError, EstimationError
from effects.services.analysis_service import IteVector, config_digest
from effects.services.dataset_service import ObservationalDataset, is_binary_column

logger = logging.getLogger(__name__)

IDENTITY = "identity"
PROBIT = "probit"
LINKS = (IDENTITY, PROBIT)

GROW = "grow"
PRUNE = "prune"
CHANGE = "change"
SWAP = "swap"
MOVE_KINDS = (GROW, PRUNE, CHANGE, SWAP)
MOVE_WEIGHTS = {GROW: 0.25, PRUNE: 0.25, CHANGE: 0.40, SWAP: 0.10}

DEFAULT_TREES = {IDENTITY: 200, PROBIT: 50}
# Leaf-scale numerators: half-range of the scaled outcome, and a 3-sd probit range.
LEAF_SCALE_SPAN = {IDENTITY: 0.5, PROBIT: 3.0}
CONSISTENCY_TOLERANCE = 1e-9


@dataclass(frozen=True)
class BartConfig:
    """
    Sampler settings. Diagnostic switches (fixed_sigma, leaf_scale,
    freeze_trees, max_depth, standardize, trace_structure, check_consistency)
    default to the ordinary sampler.
    """
    num_trees: Optional[int] = None
    alpha: float = 0.95
    beta: float = 2.0
    k: float = 2.0
    nu: float = 3.0
    q: float = 0.9
    burn_in: int = 100
    draws: int = 1000
    link: Optional[str] = None
    seed: int = 0
    fixed_sigma: Optional[float] = None
    leaf_scale: Optional[float] = None
    freeze_trees: bool = False
    max_depth: Optional[int] = None
    standardize: bool = True
    trace_structure: bool = False
    check_consistency: bool = False

    def __post_init__(self):
        if self.num_trees is not None and self.num_trees < 1:
            raise DataValidationError("num_trees must be at least 1")
        if not 0.0 < self.alpha < 1.0:
            raise DataValidationError("alpha must lie in (0, 1)")
        if self.beta < 0:
            raise DataValidationError("beta must be nonnegative")
        if self.k <= 0:
            raise DataValidationError("k must be positive")
        if self.nu <= 0:
            raise DataValidationError("nu must be positive")
        if not 0.0 < self.q < 1.0:
            raise DataValidationError("q must lie in (0, 1)")
        if self.burn_in < 0:
            raise DataValidationError("burn_in must be nonnegative")
        if self.draws < 1:
            raise DataValidationError("draws must be at least 1")
        if self.link is not None and self.link not in LINKS:
            raise DataValidationError(f"unknown link {self.link!r}; expected one of {', '.join(LINKS)}")
        if self.fixed_sigma is not None and self.fixed_sigma <= 0:
            raise DataValidationError("fixed_sigma must be positive")
        if self.leaf_scale is not None and self.leaf_scale <= 0:
            raise DataValidationError("leaf_scale must be positive")
        if self.max_depth is not None and self.max_depth < 0:
            raise DataValidationError("max_depth must be nonnegative")

    def trees_for(self, link: str) -> int:
        return self.num_trees if self.num_trees is not None else DEFAULT_TREES[link]


@dataclass
class TreeNode:
    depth: int
    parent: int = -1
    feature: int = -1
    threshold: float = 0.0
    left: int = -1
    right: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0


class TreeShape:
    """
    Mutable tree structure keyed by node id. Root id 0, root depth 0.
    Rows go left iff x[feature] <= threshold.
    """

    def __init__(self, nodes: Optional[Dict[int, TreeNode]] = None, next_id: int = 1):
        self.nodes = nodes if nodes is not None else {0: TreeNode(depth=0)}
        self.next_id = next_id

    @classmethod
    def stump(cls) -> "TreeShape":
        return cls()

    def copy(self) -> "TreeShape":
        return TreeShape({i: replace(node) for i, node in self.nodes.items()}, self.next_id)

    def leaves(self) -> List[int]:
        return sorted(i for i, node in self.nodes.items() if node.is_leaf)

    def internal_nodes(self) -> List[int]:
        return sorted(i for i, node in self.nodes.items() if not node.is_leaf)

    def prunable_nodes(self) -> List[int]:
        return [
            i for i in self.internal_nodes()
            if self.nodes[self.nodes[i].left].is_leaf and self.nodes[self.nodes[i].right].is_leaf
        ]

    def swappable_pairs(self) -> List[Tuple[int, int]]:
        pairs = []
        for i in self.internal_nodes():
            node = self.nodes[i]
            for child in (node.left, node.right):
                if not self.nodes[child].is_leaf:
                    pairs.append((i, child))
        return pairs

    def growable_leaves(self, max_depth: Optional[int] = None) -> List[int]:
        if max_depth is None:
            return self.leaves()
        return [i for i in self.leaves() if self.nodes[i].depth < max_depth]

    def split(self, node: int, feature: int, threshold: float) -> Tuple[int, int]:
        target = self.nodes[node]
        if not target.is_leaf:
            raise ValueError(f"node {node} is already split")
        left, right = self.next_id, self.next_id + 1
        self.next_id += 2
        self.nodes[left] = TreeNode(depth=target.depth + 1, parent=node)
        self.nodes[right] = TreeNode(depth=target.depth + 1, parent=node)
        target.feature, target.threshold = int(feature), float(threshold)
        target.left, target.right = left, right
        return left, right

    def collapse(self, node: int) -> None:
        """Turn an internal node whose children are both leaves back into a leaf."""
        target = self.nodes[node]
        if target.is_leaf or not (self.nodes[target.left].is_leaf and self.nodes[target.right].is_leaf):
            raise ValueError(f"node {node} is not prunable")
        del self.nodes[target.left]
        del self.nodes[target.right]
        target.feature, target.threshold = -1, 0.0
        target.left, target.right = -1, -1

    def subtree(self, node: int) -> List[int]:
        out, stack = [], [node]
        while stack:
            current = stack.pop()
            out.append(current)
            entry = self.nodes[current]
            if not entry.is_leaf:
                stack.extend((entry.right, entry.left))
        return out

    def subtree_leaves(self, node: int) -> List[int]:
        return [i for i in self.subtree(node) if self.nodes[i].is_leaf]

    def assign(self, features: np.ndarray, rows: Optional[np.ndarray] = None, start: int = 0) -> np.ndarray:
        """Leaf id for each selected row, routing from node `start`."""
        if rows is None:
            rows = np.arange(features.shape[0])
        out = np.full(rows.shape[0], start, dtype=np.int64)
        stack = [(start, np.arange(rows.shape[0]))]
        while stack:
            node, idx = stack.pop()
            entry = self.nodes[node]
            if entry.is_leaf:
                out[idx] = node
                continue
            go_left = features[rows[idx], entry.feature] <= entry.threshold
            stack.append((entry.left, idx[go_left]))
            stack.append((entry.right, idx[~go_left]))
        return out

    def signature(self, node: int = 0) -> Tuple:
        """Canonical nested tuple of the structure below node (ids ignored)."""
        entry = self.nodes[node]
        if entry.is_leaf:
            return ()
        return (entry.feature, entry.threshold, self.signature(entry.left), self.signature(entry.right))

    def max_depth(self) -> int:
        return max(node.depth for node in self.nodes.values())

    def to_dict(self) -> Dict[str, Any]:
        return {
            str(i): {"depth": n.depth, "feature": n.feature, "threshold": n.threshold, "left": n.left, "right": n.right}
            for i, n in sorted(self.nodes.items())
        }


def cutpoints_for(features: np.ndarray) -> List[np.ndarray]:
    """Candidate thresholds per feature: observed distinct values except the largest."""
    return [np.unique(features[:, j])[:-1] for j in range(features.shape[1])]


def available_features(cutpoints: Sequence[np.ndarray]) -> List[int]:
    return [j for j, cuts in enumerate(cutpoints) if cuts.size > 0]


def split_probability(config: BartConfig, depth: int) -> float:
    return config.alpha * (1.0 + depth) ** (-config.beta)


def tree_log_prior(tree: TreeShape, config: BartConfig, cutpoints: Optional[Sequence[np.ndarray]] = None) -> float:
    """
    Log prior of a tree: split probability alpha (1 + d)^-beta at internal
    nodes, its complement at leaves, plus uniform rule terms when cutpoints
    are given. Leaves at the depth cap contribute nothing.
    """
    n_available = len(available_features(cutpoints)) if cutpoints is not None else 0
    log_prior = 0.0
    for node in tree.nodes.values():
        p_split = split_probability(config, node.depth)
        if node.is_leaf:
            if config.max_depth is None or node.depth < config.max_depth:
                log_prior += math.log1p(-p_split)
        else:
            log_prior += math.log(p_split)
            if cutpoints is not None:
                log_prior -= math.log(n_available) + math.log(cutpoints[node.feature].size)
    return log_prior


def move_probabilities(tree: TreeShape, can_grow: bool = True, max_depth: Optional[int] = None) -> Dict[str, float]:
    """Move-kind probabilities renormalised over the moves feasible on this tree."""
    feasible = {
        GROW: can_grow and bool(tree.growable_leaves(max_depth)),
        PRUNE: bool(tree.prunable_nodes()),
        CHANGE: bool(tree.internal_nodes()),
        SWAP: bool(tree.swappable_pairs()),
    }
    total = sum(MOVE_WEIGHTS[kind] for kind in MOVE_KINDS if feasible[kind])
    if total == 0:
        return {}
    return {kind: MOVE_WEIGHTS[kind] / total for kind in MOVE_KINDS if feasible[kind]}


def draw_move_kind(tree: TreeShape, rng: np.random.Generator, can_grow: bool = True,
                   max_depth: Optional[int] = None) -> Optional[str]:
    probs = move_probabilities(tree, can_grow, max_depth)
    if not probs:
        return None
    kinds = list(probs)
    return kinds[int(rng.choice(len(kinds), p=[probs[k] for k in kinds]))]


@dataclass(frozen=True)
class TreeProposal:
    tree: TreeShape
    kind: str
    node: int
    log_ratio: float


def _draw_rule(cutpoints: Sequence[np.ndarray], available: Sequence[int], rng: np.random.Generator) -> Tuple[int, float]:
    feature = available[int(rng.integers(len(available)))]
    cuts = cutpoints[feature]
    return feature, float(cuts[int(rng.integers(cuts.size))])


def propose_tree_move(tree: TreeShape, cutpoints: Sequence[np.ndarray], rng: np.random.Generator,
                      max_depth: Optional[int] = None) -> Optional[TreeProposal]:
    """
    Draw a grow, prune, change or swap proposal for one tree.

    log_ratio is log q(new -> old) - log q(old -> new). Rule terms of
    grow, prune and change cancel against the prior's rule terms in
    tree_log_prior; swap is symmetric.
    Returns None when no move is feasible.
    """
    available = available_features(cutpoints)
    kind = draw_move_kind(tree, rng, bool(available), max_depth)
    if kind is None:
        return None
    probs = move_probabilities(tree, bool(available), max_depth)
    new = tree.copy()

    if kind == GROW:
        growable = tree.growable_leaves(max_depth)
        node = growable[int(rng.integers(len(growable)))]
        feature, threshold = _draw_rule(cutpoints, available, rng)
        new.split(node, feature, threshold)
        reverse = move_probabilities(new, True, max_depth)
        rule_log_prob = -math.log(len(available)) - math.log(cutpoints[feature].size)
        log_ratio = (math.log(reverse[PRUNE]) - math.log(len(new.prunable_nodes()))
                     - math.log(probs[GROW]) + math.log(len(growable)) - rule_log_prob)
        return TreeProposal(new, kind, node, log_ratio)

    if kind == PRUNE:
        prunable = tree.prunable_nodes()
        node = prunable[int(rng.integers(len(prunable)))]
        entry = tree.nodes[node]
        rule_log_prob = -math.log(len(available)) - math.log(cutpoints[entry.feature].size)
        new.collapse(node)
        reverse = move_probabilities(new, True, max_depth)
        log_ratio = (math.log(reverse[GROW]) - math.log(len(new.growable_leaves(max_depth))) + rule_log_prob
                     - math.log(probs[PRUNE]) + math.log(len(prunable)))
        return TreeProposal(new, kind, node, log_ratio)

    if kind == CHANGE:
        internal = tree.internal_nodes()
        node = internal[int(rng.integers(len(internal)))]
        old_feature = tree.nodes[node].feature
        feature, threshold = _draw_rule(cutpoints, available, rng)
        new.nodes[node].feature = feature
        new.nodes[node].threshold = threshold
        # the available-feature count is the same both ways; only the cutpoint counts differ
        log_ratio = math.log(cutpoints[feature].size) - math.log(cutpoints[old_feature].size)
        return TreeProposal(new, kind, node, log_ratio)

    pairs = tree.swappable_pairs()
    parent, child = pairs[int(rng.integers(len(pairs)))]
    a, b = new.nodes[parent], new.nodes[child]
    a.feature, b.feature = b.feature, a.feature
    a.threshold, b.threshold = b.threshold, a.threshold
    return TreeProposal(new, kind, parent, 0.0)


def _leaf_terms(sum_bb: np.ndarray, sum_br: np.ndarray, sigma: float, sigma_mu: float) -> float:
    s2, m2 = sigma * sigma, sigma_mu * sigma_mu
    denom = s2 + sum_bb * m2
    return float(np.sum(0.5 * np.log(s2 / denom) + m2 * sum_br ** 2 / (2.0 * s2 * denom)))


def leaf_marginal_loglik(residual_groups: Sequence[Sequence[float]], sigma: float, sigma_mu: float) -> float:
    """
    Log marginal likelihood of leaf-grouped residuals with each leaf value
    integrated out under N(0, sigma_mu^2). Empty groups contribute 0.
    """
    if sigma <= 0 or sigma_mu <= 0:
        raise DataValidationError("sigma and sigma_mu must be positive")
    total = 0.0
    s2 = sigma * sigma
    for group in residual_groups:
        r = np.asarray(group, dtype=float)
        if r.size == 0:
            continue
        total += _leaf_terms(np.array([float(r.size)]), np.array([r.sum()]), sigma, sigma_mu)
        total += -float(np.dot(r, r)) / (2.0 * s2) - 0.5 * r.size * math.log(2.0 * math.pi * s2)
    return total


def _grouped_loglik(leaf_ids: np.ndarray, residual: np.ndarray, basis: np.ndarray, sigma: float, sigma_mu: float) -> float:
    """Leaf-value-dependent part of the marginal for the leaves present in leaf_ids."""
    _, inverse = np.unique(leaf_ids, return_inverse=True)
    sum_bb = np.bincount(inverse, weights=basis * basis)
    sum_br = np.bincount(inverse, weights=basis * residual)
    return _leaf_terms(sum_bb, sum_br, sigma, sigma_mu)


class TreeEnsemble:
    """
    Sum-of-trees component f(x) = b(x) * sum_j g(x; T_j, M_j).

    basis is 1 for an ordinary ensemble and the exposure for an effect
    ensemble. Per-unit fits are maintained incrementally for the training
    rows and the optional test rows.
    """

    def __init__(
        self,
        features: np.ndarray,
        num_trees: int,
        sigma_mu: float,
        config: BartConfig,
        rng: np.random.Generator,
        basis: Optional[np.ndarray] = None,
        test_features: Optional[np.ndarray] = None,
        test_basis: Optional[np.ndarray] = None,
    ):
        self.features = np.asarray(features, dtype=float)
        n = self.features.shape[0]
        self.basis = np.ones(n) if basis is None else np.asarray(basis, dtype=float)
        self.test_features = None if test_features is None else np.asarray(test_features, dtype=float)
        n_test = 0 if self.test_features is None else self.test_features.shape[0]
        if test_basis is None:
            self.test_basis = np.ones(n_test)
        else:
            self.test_basis = np.asarray(test_basis, dtype=float)
        self.num_trees = num_trees
        self.sigma_mu = sigma_mu
        self.config = config
        self.rng = rng
        self.cutpoints = cutpoints_for(self.features)
        self.trees = [TreeShape.stump() for _ in range(num_trees)]
        self.priors = [tree_log_prior(t, config, self.cutpoints) for t in self.trees]
        self.values: List[Dict[int, float]] = [{0: 0.0} for _ in range(num_trees)]
        self.leaf_of = [np.zeros(n, dtype=np.int64) for _ in range(num_trees)]
        self.test_leaf_of = [np.zeros(n_test, dtype=np.int64) for _ in range(num_trees)]
        self.fit = np.zeros(n)
        self.test_fit = np.zeros(n_test)
        self.proposed = {kind: 0 for kind in MOVE_KINDS}
        self.accepted = {kind: 0 for kind in MOVE_KINDS}

    def _lookup(self, j: int) -> np.ndarray:
        lut = np.zeros(self.trees[j].next_id)
        for node, value in self.values[j].items():
            lut[node] = value
        return lut

    def contribution(self, j: int) -> np.ndarray:
        return self._lookup(j)[self.leaf_of[j]] * self.basis

    def test_contribution(self, j: int) -> np.ndarray:
        return self._lookup(j)[self.test_leaf_of[j]] * self.test_basis

    def recompute_fit(self) -> Tuple[np.ndarray, np.ndarray]:
        """Fits rebuilt from scratch, for consistency checks."""
        fit = np.zeros_like(self.fit)
        test_fit = np.zeros_like(self.test_fit)
        for j in range(self.num_trees):
            fit += self.contribution(j)
            test_fit += self.test_contribution(j)
        return fit, test_fit

    def propose(self, j: int) -> Optional[TreeProposal]:
        return propose_tree_move(self.trees[j], self.cutpoints, self.rng, self.config.max_depth)

    def sweep(self, target: np.ndarray, sigma: float) -> None:
        for j in range(self.num_trees):
            self.update_tree(j, target, sigma)

    def update_tree(self, j: int, target: np.ndarray, sigma: float) -> None:
        """One Metropolis-Hastings step on T_j followed by a conjugate draw of M_j."""
        own = self.contribution(j)
        own_test = self.test_contribution(j)
        residual = target - (self.fit - own)
        if not self.config.freeze_trees:
            self._metropolis_step(j, residual, sigma)
        self._draw_leaf_values(j, residual, sigma)
        self.fit += self.contribution(j) - own
        if self.test_fit.size:
            self.test_fit += self.test_contribution(j) - own_test

    def _metropolis_step(self, j: int, residual: np.ndarray, sigma: float) -> bool:
        tree = self.trees[j]
        proposal = self.propose(j)
        if proposal is None:
            return False
        self.proposed[proposal.kind] += 1
        old_leaves = tree.subtree_leaves(proposal.node)
        mask = np.isin(self.leaf_of[j], old_leaves)
        rows = np.flatnonzero(mask)
        new_ids = proposal.tree.assign(self.features, rows, start=proposal.node)
        new_leaves = proposal.tree.subtree_leaves(proposal.node)
        if np.unique(new_ids).size < len(new_leaves):
            return False

        old_lik = _grouped_loglik(self.leaf_of[j][rows], residual[rows], self.basis[rows], sigma, self.sigma_mu)
        new_lik = _grouped_loglik(new_ids, residual[rows], self.basis[rows], sigma, self.sigma_mu)
        new_prior = tree_log_prior(proposal.tree, self.config, self.cutpoints)
        log_accept = new_lik - old_lik + new_prior - self.priors[j] + proposal.log_ratio
        if math.log(self.rng.uniform()) >= log_accept:
            return False

        self.trees[j] = proposal.tree
        self.priors[j] = new_prior
        self.leaf_of[j] = self.leaf_of[j].copy()
        self.leaf_of[j][rows] = new_ids
        if self.test_fit.size:
            test_rows = np.flatnonzero(np.isin(self.test_leaf_of[j], old_leaves))
            self.test_leaf_of[j] = self.test_leaf_of[j].copy()
            self.test_leaf_of[j][test_rows] = proposal.tree.assign(self.test_features, test_rows, start=proposal.node)
        self.accepted[proposal.kind] += 1
        return True

    def _draw_leaf_values(self, j: int, residual: np.ndarray, sigma: float) -> None:
        leaves = self.trees[j].leaves()
        size = self.trees[j].next_id
        sum_bb = np.bincount(self.leaf_of[j], weights=self.basis * self.basis, minlength=size)[leaves]
        sum_br = np.bincount(self.leaf_of[j], weights=self.basis * residual, minlength=size)[leaves]
        s2, m2 = sigma * sigma, self.sigma_mu * self.sigma_mu
        denom = s2 + sum_bb * m2
        mean = m2 * sum_br / denom
        sd = np.sqrt(s2 * m2 / denom)
        draws = mean + sd * self.rng.standard_normal(len(leaves))
        self.values[j] = {leaf: float(v) for leaf, v in zip(leaves, draws)}

    def verify(self) -> float:
        """Largest gap between incremental and recomputed fits."""
        fit, test_fit = self.recompute_fit()
        gap = float(np.max(np.abs(fit - self.fit))) if fit.size else 0.0
        if test_fit.size:
            gap = max(gap, float(np.max(np.abs(test_fit - self.test_fit))))
        return gap

    def acceptance_rates(self) -> Dict[str, float]:
        return {
            kind: (self.accepted[kind] / self.proposed[kind]) if self.proposed[kind] else 0.0
            for kind in MOVE_KINDS
        }


def propose_move(state: TreeEnsemble, j: int, rng: Optional[np.random.Generator] = None) -> Optional[TreeProposal]:
    """Proposal for tree j of an ensemble."""
    if not 0 <= j < state.num_trees:
        raise IndexError(f"tree {j} does not exist")
    return propose_tree_move(state.trees[j], state.cutpoints, rng if rng is not None else state.rng,
                             state.config.max_depth)


@dataclass(frozen=True)
class PosteriorDraws:
    """K x n table of kept predictions on the link scale, plus sigma draws."""
    values: np.ndarray
    sigma: Optional[np.ndarray] = None

    @property
    def num_draws(self) -> int:
        return int(self.values.shape[0])

    def mean(self) -> np.ndarray:
        return self.values.mean(axis=0)

    def to_frame(self) -> pd.DataFrame:
        k, n = self.values.shape
        return pd.DataFrame({
            "iteration": np.repeat(np.arange(k), n),
            "unit": np.tile(np.arange(n), k),
            "value": self.values.ravel(),
        })


@dataclass(eq=False)
class BartRun:
    train: PosteriorDraws
    test: Optional[PosteriorDraws]
    link: str
    num_trees: int
    sigma_mu: float
    config: BartConfig
    acceptance: Dict[str, float]
    flags: List[str] = field(default_factory=list)
    structure_trace: Optional[List[Tuple]] = None
    max_consistency_gap: float = 0.0


def resolve_link(config: BartConfig, outcome: np.ndarray) -> str:
    if config.link is not None:
        if config.link == PROBIT and not is_binary_column(outcome):
            raise DataValidationError("probit link needs a binary (0/1) outcome")
        return config.link
    return PROBIT if is_binary_column(outcome) else IDENTITY


def least_squares_sigma(features: np.ndarray, outcome: np.ndarray) -> float:
    """Residual sd of a linear fit, or the outcome sd when n <= p + 1; 1.0 if zero."""
    n, p = features.shape
    if n > p + 1:
        design = np.column_stack([np.ones(n), features])
        coef, *_ = np.linalg.lstsq(design, outcome, rcond=None)
        resid = outcome - design @ coef
        sigma = float(np.sqrt(np.dot(resid, resid) / (n - p - 1)))
    else:
        sigma = float(np.std(outcome, ddof=1)) if n > 1 else 0.0
    return sigma if sigma > 1e-12 else 1.0


def sigma_prior_scale(sigma_hat: float, nu: float, q: float) -> float:
    """lambda with P(sigma < sigma_hat) = q under sigma^2 ~ nu lambda / chi2_nu."""
    return sigma_hat ** 2 * stats.chi2.ppf(1.0 - q, nu) / nu


def draw_sigma(residual: np.ndarray, nu: float, lam: float, rng: np.random.Generator) -> float:
    n = residual.size
    return float(np.sqrt((nu * lam + np.dot(residual, residual)) / rng.chisquare(nu + n)))


def draw_latents(fit: np.ndarray, outcome: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Probit latents N(fit, 1) truncated to > 0 for events and <= 0 otherwise."""
    lower = np.where(outcome > 0.5, -fit, -np.inf)
    upper = np.where(outcome > 0.5, np.inf, -fit)
    return stats.truncnorm.rvs(lower, upper, loc=fit, scale=1.0, size=fit.size, random_state=rng)


def progress_range(total: int, desc: str):
    return tqdm(range(total), desc=desc, disable=not bool(getattr(settings, "EMM_SHOW_PROGRESS", False)))


def backfit_mcmc(
    features: np.ndarray,
    outcome: np.ndarray,
    config: BartConfig = BartConfig(),
    test_features: Optional[np.ndarray] = None,
) -> BartRun:
    """
    Run the backfitting sampler for K0 + K iterations and keep the last K.

    Continuous outcomes are mapped to [-0.5, 0.5] (unless standardize is
    off) and draws are returned on the original scale. Binary outcomes use
    a probit link with latent augmentation and an offset of Phi^-1(mean y);
    their draws are on the latent scale.
    """
    features = np.asarray(features, dtype=float)
    outcome = np.asarray(outcome, dtype=float)
    if features.ndim != 2 or features.shape[0] != outcome.shape[0]:
        raise DataValidationError("features must be an n x p table matching the outcome length")
    if not np.all(np.isfinite(features)) or not np.all(np.isfinite(outcome)):
        raise EstimationError("non-finite values in BART inputs")
    if test_features is not None:
        test_features = np.asarray(test_features, dtype=float)
        if test_features.ndim != 2 or test_features.shape[1] != features.shape[1]:
            raise DataValidationError("test features must have the same columns as the training features")

    link = resolve_link(config, outcome)
    n = outcome.size
    m = config.trees_for(link)
    sigma_mu = config.leaf_scale if config.leaf_scale is not None else LEAF_SCALE_SPAN[link] / (config.k * math.sqrt(m))
    rng = np.random.default_rng(config.seed)
    flags: List[str] = []
    if config.burn_in == 0:
        logger.warning("BART run without burn-in; early draws are kept")
        flags.append("no_burn_in")

    center, scale, offset = 0.0, 1.0, 0.0
    if link == IDENTITY:
        if config.standardize:
            low, high = float(outcome.min()), float(outcome.max())
            center = 0.5 * (low + high)
            scale = high - low if high > low else 1.0
        target = (outcome - center) / scale
        sigma = config.fixed_sigma if config.fixed_sigma is not None else least_squares_sigma(features, target)
        lam = sigma_prior_scale(sigma, config.nu, config.q)
    else:
        mean = min(max(float(outcome.mean()), 1e-3), 1.0 - 1e-3)
        offset = float(stats.norm.ppf(mean))
        sigma = 1.0
        lam = 0.0
        target = np.zeros(n)

    ensemble = TreeEnsemble(features, m, sigma_mu, config, rng, test_features=test_features)
    n_test = 0 if test_features is None else test_features.shape[0]
    train_draws = np.empty((config.draws, n))
    test_draws = np.empty((config.draws, n_test)) if test_features is not None else None
    sigma_draws = np.empty(config.draws) if link == IDENTITY else None
    trace: Optional[List[Tuple]] = [] if config.trace_structure else None
    worst_gap = 0.0

    logger.info(f"BART chain: link={link}, trees={m}, burn_in={config.burn_in}, draws={config.draws}, n={n}")
    for it in progress_range(config.burn_in + config.draws, "bart"):
        if link == PROBIT:
            target = draw_latents(ensemble.fit + offset, outcome, rng) - offset
        ensemble.sweep(target, sigma)
        if link == IDENTITY and config.fixed_sigma is None:
            sigma = draw_sigma(target - ensemble.fit, config.nu, lam, rng)
        if not np.all(np.isfinite(ensemble.fit)):
            raise EstimationError(f"non-finite fit at iteration {it}")
        if config.check_consistency:
            worst_gap = max(worst_gap, ensemble.verify())
        if trace is not None:
            trace.append(tuple(tree.signature() for tree in ensemble.trees))
        k = it - config.burn_in
        if k >= 0:
            if link == IDENTITY:
                train_draws[k] = ensemble.fit * scale + center
                if test_draws is not None:
                    test_draws[k] = ensemble.test_fit * scale + center
                sigma_draws[k] = sigma * scale
            else:
                train_draws[k] = ensemble.fit + offset
                if test_draws is not None:
                    test_draws[k] = ensemble.test_fit + offset

    if config.check_consistency and worst_gap > CONSISTENCY_TOLERANCE:
        raise EstimationError(f"incremental fit drifted by {worst_gap:g}")
    logger.info(f"BART chain finished; acceptance {ensemble.acceptance_rates()}")
    return BartRun(
        train=PosteriorDraws(train_draws, sigma_draws),
        test=PosteriorDraws(test_draws) if test_draws is not None else None,
        link=link,
        num_trees=m,
        sigma_mu=sigma_mu,
        config=config,
        acceptance=ensemble.acceptance_rates(),
        flags=flags,
        structure_trace=trace,
        max_consistency_gap=worst_gap,
    )


def split_half_check(draws: PosteriorDraws) -> float:
    """
    Difference between the second and first half means of the per-draw
    average prediction, in units of its posterior sd (0 when constant).
    """
    per_draw = draws.values.mean(axis=1)
    if per_draw.size < 2:
        return 0.0
    half = per_draw.size // 2
    sd = float(per_draw.std(ddof=1))
    if sd == 0.0:
        return 0.0
    return float((per_draw[half:].mean() - per_draw[:half].mean()) / sd)


def expit(x):
    """Inverse logit 1 / (1 + exp(-x)), stable for large |x|."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out) if out.ndim == 0 else out


def inverse_link(link: str, values: np.ndarray) -> np.ndarray:
    return stats.norm.cdf(values) if link == PROBIT else values


@dataclass(eq=False)
class BartFit:
    run: BartRun
    covariate_names: Tuple[str, ...]
    n: int
    outcome_kind: str


def counterfactual_tables(covariates: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Training table [X, z] for the exposure levels (1, 0), stacked."""
    n = covariates.shape[0]
    exposed = np.column_stack([covariates, np.ones(n)])
    unexposed = np.column_stack([covariates, np.zeros(n)])
    return exposed, unexposed


def fit_bart(data: ObservationalDataset, config: BartConfig = BartConfig()) -> BartFit:
    """Fit outcome ~ (X, z) and predict both counterfactual tables alongside."""
    features = np.column_stack([data.covariates, data.exposure])
    exposed, unexposed = counterfactual_tables(np.asarray(data.covariates, dtype=float))
    run = backfit_mcmc(features, data.outcome, config, test_features=np.vstack([exposed, unexposed]))
    if run.link == PROBIT:
        run.flags.append("probit_link")
    return BartFit(run=run, covariate_names=tuple(data.covariate_names), n=data.n, outcome_kind=data.outcome_kind)


def ite_from_draws(link: str, exposed_draws: np.ndarray, unexposed_draws: np.ndarray) -> np.ndarray:
    """mean_k link^-1(f_k(x, 1)) - mean_k link^-1(f_k(x, 0)) per unit."""
    return inverse_link(link, exposed_draws).mean(axis=0) - inverse_link(link, unexposed_draws).mean(axis=0)


def estimate_ite_counterfactual(fit: BartFit, data: ObservationalDataset) -> IteVector:
    """Per-unit ITE from the counterfactual predictions, with 95% credible bounds."""
    if tuple(data.covariate_names) != fit.covariate_names:
        raise DataValidationError("covariate schema differs from the one the model was fitted on")
    if data.n != fit.n or fit.run.test is None:
        raise DataValidationError("counterfactual tables do not match the fitted dataset")
    values = fit.run.test.values
    exposed, unexposed = values[:, :fit.n], values[:, fit.n:]
    estimates = ite_from_draws(fit.run.link, exposed, unexposed)
    per_draw = inverse_link(fit.run.link, exposed) - inverse_link(fit.run.link, unexposed)
    lower, upper = np.percentile(per_draw, [2.5, 97.5], axis=0)
    if fit.run.link == PROBIT:
        estimates = np.clip(estimates, -1.0, 1.0)
    return IteVector(
        estimates=estimates,
        method="bart",
        seed=fit.run.config.seed,
        config_digest=config_digest(fit.run.config),
        lower=lower,
        upper=upper,
        outcome_kind=fit.outcome_kind,
        flags=tuple(fit.run.flags),
    )

