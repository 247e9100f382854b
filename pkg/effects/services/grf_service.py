"""Generalized random forest estimator for heterogeneous treatment effects."""
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from effects.exceptions import DataValidationError, PositivityError, RankDeficiencyError
from effects.services.dataset_service import ObservationalDataset
from effects.services.forest_service import (
    DecisionTree,
    ForestConfig,
    build_trees,
    forest_weights,
    grow_gradient_tree,
    honest_partition,
    regression_forest_oob,
    subsample,
)
from effects.services.rng_service import derive_seed, substream

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
PROPENSITY_CLIP = (0.01, 0.99)
HARD_MIN_UNITS = 20
RECOMMENDED_MIN_UNITS = 50
DEGENERATE_TOLERANCE = 1e-12


@dataclass(frozen=True)
class GrfConfig:
    """Causal forest tunables; nuisance forests reuse the same leaf rules."""
    num_trees: int = 500
    nuisance_trees: int = 200
    sample_fraction: float = 0.5
    honesty: bool = True
    honesty_fraction: float = 0.5
    min_leaf_size: int = 5
    max_depth: Optional[int] = None
    mtry: Optional[int] = None
    importance_max_depth: int = 4
    importance_decay: float = 2.0

    def forest_config(self, num_trees: Optional[int] = None) -> ForestConfig:
        return ForestConfig(
            num_trees=self.num_trees if num_trees is None else num_trees,
            sample_fraction=self.sample_fraction,
            honesty=self.honesty,
            honesty_fraction=self.honesty_fraction,
            min_leaf_size=self.min_leaf_size,
            max_depth=self.max_depth,
            mtry=self.mtry,
        )


@dataclass(eq=False)
class CausalForestModel:
    trees: List[DecisionTree]
    inbag: np.ndarray
    features: np.ndarray
    exposure: np.ndarray
    outcome: np.ndarray
    y_hat: np.ndarray
    e_hat: np.ndarray
    y_tilde: np.ndarray
    z_tilde: np.ndarray
    tau_oob: np.ndarray
    covariate_names: Tuple[str, ...]
    config: GrfConfig
    seed: int
    flags: List[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return int(self.outcome.shape[0])


@dataclass(frozen=True)
class IteEstimate:
    estimate: float
    variance: float


@dataclass(frozen=True)
class AteEstimate:
    estimate: float
    std_error: float
    ci_lower: float
    ci_upper: float
    mean_ite: float


@dataclass(frozen=True)
class BlpReport:
    """Calibration regression of centered outcomes on (C, D)."""
    mean_coef: float
    diff_coef: float
    mean_se: float
    diff_se: float
    mean_p: float
    diff_p: float


@dataclass(frozen=True)
class ProjectionRow:
    name: str
    coef: float
    std_error: float
    ci_lower: float
    ci_upper: float


@dataclass(frozen=True)
class LinearProjection:
    intercept: ProjectionRow
    rows: Tuple[ProjectionRow, ...]


@dataclass(frozen=True)
class VariableImportance:
    names: Tuple[str, ...]
    scores: np.ndarray

    def ranked(self) -> List[Tuple[str, float]]:
        order = np.argsort(-self.scores, kind="stable")
        return [(self.names[i], float(self.scores[i])) for i in order]


def _leaf_moments(tree: DecisionTree, y_tilde: np.ndarray, z_tilde: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-node mean of Z~Y~ and Z~^2 over each leaf's estimation members."""
    zy = np.zeros(tree.n_nodes)
    zz = np.zeros(tree.n_nodes)
    for leaf, members in tree.leaf_members.items():
        if members.size:
            zt = z_tilde[members]
            zy[leaf] = np.dot(zt, y_tilde[members]) / members.size
            zz[leaf] = np.dot(zt, zt) / members.size
    return zy, zz


def _forest_moments(
    model_trees: Sequence[DecisionTree],
    features: np.ndarray,
    y_tilde: np.ndarray,
    z_tilde: np.ndarray,
    inbag: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Forest-averaged sum(alpha Z~Y~) and sum(alpha Z~^2) for each row of features.

    With inbag given, row i only uses trees whose replicate excluded unit i.
    """
    m = features.shape[0]
    num = np.zeros(m)
    den = np.zeros(m)
    used = np.zeros(m)
    for b, tree in enumerate(model_trees):
        leaves = tree.apply(features)
        zy, zz = _leaf_moments(tree, y_tilde, z_tilde)
        sizes = np.zeros(tree.n_nodes)
        for leaf, members in tree.leaf_members.items():
            sizes[leaf] = members.size
        ok = sizes[leaves] > 0
        if inbag is not None:
            ok &= ~inbag[b]
        num[ok] += zy[leaves[ok]]
        den[ok] += zz[leaves[ok]]
        used[ok] += 1
    return num, den, used


def fit_causal_forest(
    data: ObservationalDataset,
    config: GrfConfig = GrfConfig(),
    seed: int = 0,
    nuisances: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> CausalForestModel:
    """
    Fit a causal forest with out-of-bag nuisance centering.

    Steps: OOB propensity forest e^(-i) (clipped to [0.01, 0.99]) and outcome
    forest m^(-i); residualize; grow honest gradient trees on subsamples;
    out-of-bag ITEs for every unit. nuisances=(y_hat, e_hat) replaces the
    two nuisance forests.
    """
    n = data.n
    if n < HARD_MIN_UNITS:
        raise DataValidationError(f"causal forest needs at least {HARD_MIN_UNITS} units, got {n}")
    treated = int(data.exposure.sum())
    if treated == 0 or treated == n:
        raise DataValidationError("causal forest needs both exposed and unexposed units")
    flags: List[str] = []
    if n < RECOMMENDED_MIN_UNITS:
        logger.warning(f"Causal forest fit on only {n} units (recommended >= {RECOMMENDED_MIN_UNITS})")
        flags.append("small_sample")

    features = np.asarray(data.covariates, dtype=float)
    exposure = np.asarray(data.exposure, dtype=float)
    outcome = np.asarray(data.outcome, dtype=float)

    if nuisances is not None:
        y_hat, e_hat = (np.asarray(v, dtype=float).ravel() for v in nuisances)
        if y_hat.shape != (n,) or e_hat.shape != (n,):
            raise DataValidationError(f"supplied nuisances must each have {n} values")
        e_hat = np.clip(e_hat, *PROPENSITY_CLIP)
        flags.append("nuisances_supplied")
    else:
        logger.info(f"Fitting nuisance forests ({config.nuisance_trees} trees each)")
        nuisance_config = config.forest_config(config.nuisance_trees)
        e_forest = regression_forest_oob(
            features, exposure, nuisance_config, substream(seed, "grf", "propensity"),
            clip=PROPENSITY_CLIP, desc="propensity forest",
        )
        m_forest = regression_forest_oob(
            features, outcome, nuisance_config, substream(seed, "grf", "outcome"),
            desc="outcome forest",
        )
        if e_forest.fallback_units.size or m_forest.fallback_units.size:
            flags.append("nuisance_oob_fallback")
        e_hat = e_forest.oob_predictions
        y_hat = m_forest.oob_predictions
    y_tilde = outcome - y_hat
    z_tilde = exposure - e_hat

    forest_config = config.forest_config()
    trees_seed = derive_seed(seed, "grf", "trees")

    def build_one(b: int) -> Tuple[DecisionTree, np.ndarray]:
        rng = np.random.default_rng(derive_seed(trees_seed, b))
        sample = subsample(n, forest_config.sample_fraction, rng)
        if forest_config.honesty:
            partition = honest_partition(sample, forest_config.honesty_fraction, rng)
            grow, estimate = partition.grow_indices, partition.estimate_indices
        else:
            grow, estimate = sample, sample
        tree = grow_gradient_tree(features, y_tilde, z_tilde, grow, estimate, forest_config, rng)
        return tree, sample

    logger.info(f"Growing {forest_config.num_trees} gradient trees")
    built = build_trees(build_one, forest_config.num_trees, "causal forest")
    trees = [tree for tree, _ in built]
    inbag = np.zeros((len(trees), n), dtype=bool)
    for b, (_, sample) in enumerate(built):
        inbag[b, sample] = True

    num, den, used = _forest_moments(trees, features, y_tilde, z_tilde, inbag=inbag)
    fallback = used == 0
    if fallback.any():
        logger.warning(f"{int(fallback.sum())} unit(s) were in every replicate; using all trees for their ITE")
        flags.append("ite_oob_fallback")
        num_all, den_all, _ = _forest_moments(trees, features[fallback], y_tilde, z_tilde)
        num[fallback] = num_all
        den[fallback] = den_all
    if np.any(den <= 0):
        raise PositivityError("no exposure variation in some unit's forest neighbourhood (positivity)")
    tau_oob = num / den

    logger.info(f"Causal forest fitted: n={n}, trees={len(trees)}, mean ITE={tau_oob.mean():.4f}")
    return CausalForestModel(
        trees=trees,
        inbag=inbag,
        features=features,
        exposure=exposure,
        outcome=outcome,
        y_hat=y_hat,
        e_hat=e_hat,
        y_tilde=y_tilde,
        z_tilde=z_tilde,
        tau_oob=tau_oob,
        covariate_names=data.covariate_names,
        config=config,
        seed=seed,
        flags=flags,
    )


def solve_weighted_estimating_equation(alpha: np.ndarray, y_tilde: np.ndarray, z_tilde: np.ndarray) -> IteEstimate:
    """
    Closed-form minimiser of sum alpha_i (Y~_i - theta Z~_i)^2 with its
    delta-method variance.
    """
    alpha = np.asarray(alpha, dtype=float)
    y_tilde = np.asarray(y_tilde, dtype=float)
    z_tilde = np.asarray(z_tilde, dtype=float)
    den = float(np.sum(alpha * z_tilde * z_tilde))
    if den <= 0.0:
        raise PositivityError("no exposure variation among the weighted neighbours (positivity)")
    theta = float(np.sum(alpha * z_tilde * y_tilde)) / den
    resid = y_tilde - theta * z_tilde
    variance = float(np.sum(alpha ** 2 * resid ** 2 * z_tilde ** 2)) / den ** 2
    return IteEstimate(estimate=theta, variance=variance)


def predict_ite(model: CausalForestModel, x: np.ndarray) -> IteEstimate:
    """Effect estimate and variance at covariate point x."""
    weights = forest_weights(model.trees, x, model.n)
    return solve_weighted_estimating_equation(weights.weights, model.y_tilde, model.z_tilde)


def predict_ites(model: CausalForestModel, features: np.ndarray) -> np.ndarray:
    """Batch point estimates using every tree."""
    features = np.asarray(features, dtype=float)
    num, den, _ = _forest_moments(model.trees, features, model.y_tilde, model.z_tilde)
    if np.any(den <= 0):
        raise PositivityError("no exposure variation in some target point's neighbourhood (positivity)")
    return num / den


def oob_ite_variances(model: CausalForestModel) -> np.ndarray:
    """Delta-method variance of each unit's out-of-bag ITE."""
    variances = np.empty(model.n)
    for i in range(model.n):
        mask = ~model.inbag[:, i]
        if not mask.any():
            mask = None
        weights = forest_weights(model.trees, model.features[i], model.n, tree_mask=mask)
        variances[i] = solve_weighted_estimating_equation(weights.weights, model.y_tilde, model.z_tilde).variance
    return variances


def aipw_scores(tau: np.ndarray, exposure: np.ndarray, e_hat: np.ndarray, y_tilde: np.ndarray) -> np.ndarray:
    """Doubly robust scores tau + (Z - e)(Y~ - tau (Z - e)) / (e (1 - e))."""
    tau = np.asarray(tau, dtype=float)
    resid_z = np.asarray(exposure, dtype=float) - np.asarray(e_hat, dtype=float)
    e_hat = np.asarray(e_hat, dtype=float)
    return tau + resid_z * (np.asarray(y_tilde, dtype=float) - tau * resid_z) / (e_hat * (1.0 - e_hat))


def average_treatment_effect(model: CausalForestModel) -> AteEstimate:
    """AIPW average treatment effect with a 95% normal interval."""
    gamma = aipw_scores(model.tau_oob, model.exposure, model.e_hat, model.y_tilde)
    n = gamma.size
    estimate = float(gamma.mean())
    std_error = float(gamma.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    z = stats.norm.ppf(0.975)
    return AteEstimate(
        estimate=estimate,
        std_error=std_error,
        ci_lower=estimate - z * std_error,
        ci_upper=estimate + z * std_error,
        mean_ite=float(model.tau_oob.mean()),
    )


def robust_least_squares(design: np.ndarray, response: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    OLS coefficients with HC3 sandwich covariance.

    Raises RankDeficiencyError when the design lacks full column rank.
    """
    design = np.asarray(design, dtype=float)
    response = np.asarray(response, dtype=float)
    if design.ndim == 1:
        design = design.reshape(-1, 1)
    n, k = design.shape
    if np.linalg.matrix_rank(design) < k:
        raise RankDeficiencyError("regression design is rank deficient")
    xtx_inv = np.linalg.inv(design.T @ design)
    coef = xtx_inv @ design.T @ response
    resid = response - design @ coef
    leverage = np.einsum("ij,jk,ik->i", design, xtx_inv, design)
    scale = resid / np.maximum(1.0 - leverage, 1e-12)
    meat = (design * scale[:, None] ** 2).T @ design
    cov = xtx_inv @ meat @ xtx_inv
    return coef, cov


def _one_sided_p(coef: float, se: float, df: int) -> float:
    """p-value for H0: coefficient <= 0."""
    if se <= 0.0 or not np.isfinite(se):
        return 0.0 if coef > 0 else 1.0
    return float(stats.t.sf(coef / se, df=max(df, 1)))


def calibration_regression(response: np.ndarray, c: np.ndarray, d: np.ndarray) -> BlpReport:
    """
    No-intercept regression of response on (C, D) with robust errors.

    A D column that is zero up to rounding (relative to C) is dropped and
    reported as coefficient 0, p-value 1.
    """
    response = np.asarray(response, dtype=float)
    c = np.asarray(c, dtype=float)
    d = np.asarray(d, dtype=float)
    n = response.size
    scale = max(1.0, float(np.max(np.abs(c)))) if c.size else 1.0
    if d.size == 0 or float(np.max(np.abs(d))) <= DEGENERATE_TOLERANCE * scale:
        coef, cov = robust_least_squares(c.reshape(-1, 1), response)
        mean_se = float(np.sqrt(max(cov[0, 0], 0.0)))
        return BlpReport(
            mean_coef=float(coef[0]),
            diff_coef=0.0,
            mean_se=mean_se,
            diff_se=0.0,
            mean_p=_one_sided_p(float(coef[0]), mean_se, n - 1),
            diff_p=1.0,
        )
    coef, cov = robust_least_squares(np.column_stack([c, d]), response)
    mean_se = float(np.sqrt(max(cov[0, 0], 0.0)))
    diff_se = float(np.sqrt(max(cov[1, 1], 0.0)))
    return BlpReport(
        mean_coef=float(coef[0]),
        diff_coef=float(coef[1]),
        mean_se=mean_se,
        diff_se=diff_se,
        mean_p=_one_sided_p(float(coef[0]), mean_se, n - 2),
        diff_p=_one_sided_p(float(coef[1]), diff_se, n - 2),
    )


def test_calibration(model: CausalForestModel) -> BlpReport:
    """Omnibus calibration test of the forest's mean and differential predictions."""
    tau_bar = float(model.tau_oob.mean())
    resid_z = model.exposure - model.e_hat
    c = tau_bar * resid_z
    if np.ptp(model.tau_oob) <= DEGENERATE_TOLERANCE * max(1.0, abs(tau_bar)):
        d = np.zeros_like(resid_z)
    else:
        d = (model.tau_oob - tau_bar) * resid_z
    return calibration_regression(model.y_tilde, c, d)


# Not a unittest entry point despite the name.
test_calibration.__test__ = False


def project_scores(scores: np.ndarray, modifiers: np.ndarray, names: Sequence[str]) -> LinearProjection:
    """Robust least squares of scores on (1, modifiers)."""
    modifiers = np.asarray(modifiers, dtype=float)
    if modifiers.ndim == 1:
        modifiers = modifiers.reshape(-1, 1)
    if modifiers.shape[1] < 1:
        raise DataValidationError("best linear projection needs at least one modifier")
    if len(names) != modifiers.shape[1]:
        raise DataValidationError("one name per modifier column required")
    design = np.column_stack([np.ones(modifiers.shape[0]), modifiers])
    coef, cov = robust_least_squares(design, scores)
    z = stats.norm.ppf(0.975)

    def row(i: int, name: str) -> ProjectionRow:
        se = float(np.sqrt(max(cov[i, i], 0.0)))
        return ProjectionRow(name=name, coef=float(coef[i]), std_error=se,
                             ci_lower=float(coef[i] - z * se), ci_upper=float(coef[i] + z * se))

    return LinearProjection(
        intercept=row(0, "(intercept)"),
        rows=tuple(row(i + 1, name) for i, name in enumerate(names)),
    )


def best_linear_projection(model: CausalForestModel, modifiers: np.ndarray, names: Sequence[str]) -> LinearProjection:
    """Doubly robust subgroup CATE contrasts for the given modifier columns."""
    gamma = aipw_scores(model.tau_oob, model.exposure, model.e_hat, model.y_tilde)
    return project_scores(gamma, modifiers, names)


def depth_weighted_split_counts(trees: Sequence[DecisionTree], p: int, max_depth: int = 4, decay: float = 2.0) -> np.ndarray:
    """sum over trees and depths d <= max_depth of d^-decay * (splits on v at depth d)."""
    raw = np.zeros(p)
    for tree in trees:
        for depth, feature in tree.split_counts_by_depth():
            if depth <= max_depth:
                raw[feature] += depth ** (-decay)
    return raw


def variable_importance(model: CausalForestModel) -> VariableImportance:
    """Depth-weighted split frequencies normalised to sum 1 (all zero for stumps)."""
    raw = depth_weighted_split_counts(
        model.trees, len(model.covariate_names),
        model.config.importance_max_depth, model.config.importance_decay,
    )
    total = raw.sum()
    scores = raw / total if total > 0 else raw
    return VariableImportance(names=tuple(model.covariate_names), scores=scores)


def model_to_dict(model: CausalForestModel) -> Dict[str, Any]:
    """Versioned, JSON-ready snapshot of a fitted model."""
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "method": "grf",
        "seed": int(model.seed),
        "config": asdict(model.config),
        "covariate_names": list(model.covariate_names),
        "flags": list(model.flags),
        "nuisances": {
            "y_hat": [float(v) for v in model.y_hat],
            "e_hat": [float(v) for v in model.e_hat],
        },
        "tau_oob": [float(v) for v in model.tau_oob],
        "trees": [tree.to_dict() for tree in model.trees],
    }
