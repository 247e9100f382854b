"""Interpretation layer shared by all estimators: fit-the-fit trees, subgroup
summaries and the traditional stratified comparison."""
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import expit

from effects.exceptions import (
    DataValidationError,
    EstimationError,
    RankDeficiencyError,
    SeparationError,
)
from effects.services.dataset_service import BINARY, CONTINUOUS, ObservationalDataset, is_binary_column
from effects.services.forest_service import _build_tree

logger = logging.getLogger(__name__)

METHODS = ("grf", "bart", "bcf")
Z_95 = float(stats.norm.ppf(0.975))
SEPARATION_THRESHOLD = 30.0
IRLS_TOLERANCE = 1e-8
IRLS_MAX_ITER = 50
MAX_SUBGROUP_LEVELS = 10


def config_digest(config: Any) -> str:
    """Short stable hash of a config dataclass."""
    payload = json.dumps(asdict(config), sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


@dataclass(frozen=True, eq=False)
class IteVector:
    """Per-unit effect estimates on the additive scale, tagged with provenance."""
    estimates: np.ndarray
    method: str
    seed: int
    config_digest: str
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    outcome_kind: str = CONTINUOUS
    flags: Tuple[str, ...] = ()

    def __post_init__(self):
        estimates = np.asarray(self.estimates, dtype=float).ravel()
        if self.method not in METHODS:
            raise DataValidationError(f"unknown method tag {self.method!r}")
        if not np.all(np.isfinite(estimates)):
            raise EstimationError(f"{self.method}: non-finite individual effect estimates")
        if self.outcome_kind == BINARY and np.any(np.abs(estimates) > 1.0 + 1e-9):
            raise EstimationError(f"{self.method}: risk-difference estimates outside [-1, 1]")
        object.__setattr__(self, "estimates", estimates)

    @property
    def n(self) -> int:
        return int(self.estimates.shape[0])

    def summary(self) -> Dict[str, float]:
        q = np.percentile(self.estimates, [5, 25, 50, 75, 95])
        return {
            "mean": float(self.estimates.mean()),
            "sd": float(self.estimates.std(ddof=1)) if self.n > 1 else 0.0,
            "min": float(self.estimates.min()),
            "p05": float(q[0]),
            "p25": float(q[1]),
            "median": float(q[2]),
            "p75": float(q[3]),
            "p95": float(q[4]),
            "max": float(self.estimates.max()),
        }


# --- fit-the-fit -----------------------------------------------------------

@dataclass
class FitTheFitNode:
    id: int
    depth: int
    n: int
    mean_ite: float
    share: float
    feature: Optional[str] = None
    threshold: Optional[float] = None
    left: Optional[int] = None
    right: Optional[int] = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


@dataclass
class FitTheFitTree:
    """Shallow CART over covariates with the ITEs as target. Shares are percentages."""
    nodes: List[FitTheFitNode]
    max_depth: int
    method: str

    @property
    def root(self) -> FitTheFitNode:
        return self.nodes[0]

    def node(self, node_id: int) -> FitTheFitNode:
        return self.nodes[node_id]

    def depth(self) -> int:
        """Number of split levels actually used."""
        return max(node.depth for node in self.nodes) - 1

    def to_dict(self) -> Dict[str, Any]:
        return {"method": self.method, "max_depth": self.max_depth, "nodes": [asdict(n) for n in self.nodes]}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "FitTheFitTree":
        return cls(
            nodes=[FitTheFitNode(**node) for node in payload["nodes"]],
            max_depth=int(payload["max_depth"]),
            method=payload["method"],
        )


def fit_the_fit(
    ites: IteVector,
    covariates: np.ndarray,
    names: Sequence[str],
    max_depth: int = 3,
    min_leaf_fraction: float = 0.05,
) -> FitTheFitTree:
    """
    Regression tree with the ITEs as outcome.

    Greedy sum-of-squares splitting over all covariates and midpoint
    thresholds, ties to the lowest covariate then the lowest threshold.
    """
    covariates = np.asarray(covariates, dtype=float)
    if covariates.ndim == 1:
        covariates = covariates.reshape(-1, 1)
    target = ites.estimates
    n = target.shape[0]
    if n < 20:
        raise DataValidationError(f"fit-the-fit needs at least 20 units, got {n}")
    if covariates.shape != (n, len(names)):
        raise DataValidationError("covariate table does not match the ITE vector and names")
    if max_depth < 0:
        raise DataValidationError("max_depth must be nonnegative")
    min_leaf = max(1, int(math.ceil(min_leaf_fraction * n)))

    every = np.arange(n)
    tree = _build_tree(
        covariates, every, every, lambda members: target[members],
        min_leaf, max_depth, None, np.random.default_rng(0), honest=False,
    )

    nodes: List[FitTheFitNode] = []
    order: Dict[int, int] = {}
    # breadth-first renumbering so exports list nodes top-down
    queue = [(0, every)]
    while queue:
        raw, members = queue.pop(0)
        order[raw] = len(nodes)
        node = FitTheFitNode(
            id=len(nodes),
            depth=int(tree.depth[raw]),
            n=int(members.size),
            mean_ite=float(target[members].mean()),
            share=100.0 * members.size / n,
        )
        nodes.append(node)
        if tree.feature[raw] >= 0:
            f = int(tree.feature[raw])
            node.feature = str(names[f])
            node.threshold = float(tree.threshold[raw])
            go_left = covariates[members, f] <= tree.threshold[raw]
            queue.append((int(tree.left[raw]), members[go_left]))
            queue.append((int(tree.right[raw]), members[~go_left]))
    for raw, position in order.items():
        if tree.feature[raw] >= 0:
            nodes[position].left = order[int(tree.left[raw])]
            nodes[position].right = order[int(tree.right[raw])]
    return FitTheFitTree(nodes=nodes, max_depth=max_depth, method=ites.method)


# --- subgroup summaries ----------------------------------------------------

@dataclass
class SubgroupLevel:
    level: float
    n: int
    mean: float
    sd: float
    quantiles: Dict[str, float]
    counts: List[int]
    density: List[float]


@dataclass
class SubgroupSummary:
    covariate: str
    method: str
    bin_centers: List[float]
    density_grid: List[float]
    levels: List[SubgroupLevel]
    flags: List[str] = field(default_factory=list)

    def plot_frame(self) -> pd.DataFrame:
        """Histogram rows (level, bin, count) for redrawing per-level distributions."""
        rows = []
        for level in self.levels:
            for center, count in zip(self.bin_centers, level.counts):
                rows.append({"level": level.level, "bin": center, "count": count})
        return pd.DataFrame(rows, columns=["level", "bin", "count"])

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "SubgroupSummary":
        data = dict(payload)
        data["levels"] = [SubgroupLevel(**level) for level in payload["levels"]]
        return cls(**data)


def _kde(values: np.ndarray, grid: np.ndarray) -> List[float]:
    if values.size < 2 or np.ptp(values) == 0:
        return [0.0] * grid.size
    try:
        return [float(v) for v in stats.gaussian_kde(values)(grid)]
    except np.linalg.LinAlgError:
        return [0.0] * grid.size


def subgroup_summary(ites: IteVector, grouping: np.ndarray, covariate: str, bins: int = 20,
                     grid_points: int = 64) -> SubgroupSummary:
    """Per-level ITE distribution on histogram bins and a KDE grid shared by all levels."""
    grouping = np.asarray(grouping, dtype=float).ravel()
    values = ites.estimates
    if grouping.shape[0] != values.shape[0]:
        raise DataValidationError("grouping covariate length differs from the ITE vector")
    levels = np.unique(grouping)
    if levels.size > MAX_SUBGROUP_LEVELS:
        raise DataValidationError(
            f"grouping covariate {covariate!r} has {levels.size} levels; at most {MAX_SUBGROUP_LEVELS} supported"
        )
    flags: List[str] = []
    if levels.size == 1:
        logger.warning(f"Grouping covariate {covariate!r} has a single level")
        flags.append("single_level")

    low, high = float(values.min()), float(values.max())
    if high <= low:
        low, high = low - 0.5, high + 0.5
    edges = np.linspace(low, high, bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    grid = np.linspace(low, high, grid_points)

    rows = []
    for level in levels:
        subset = values[grouping == level]
        q = np.percentile(subset, [5, 25, 50, 75, 95])
        counts, _ = np.histogram(subset, bins=edges)
        rows.append(SubgroupLevel(
            level=float(level),
            n=int(subset.size),
            mean=float(subset.mean()),
            sd=float(subset.std(ddof=1)) if subset.size > 1 else 0.0,
            quantiles={"p05": float(q[0]), "p25": float(q[1]), "median": float(q[2]),
                       "p75": float(q[3]), "p95": float(q[4])},
            counts=[int(c) for c in counts],
            density=_kde(subset, grid),
        ))
    return SubgroupSummary(
        covariate=covariate,
        method=ites.method,
        bin_centers=[float(c) for c in centers],
        density_grid=[float(g) for g in grid],
        levels=rows,
        flags=flags,
    )


# --- logistic regression ---------------------------------------------------

@dataclass(frozen=True)
class LogisticFit:
    coefficients: np.ndarray
    covariance: np.ndarray
    converged: bool
    iterations: int
    log_likelihood: Tuple[float, ...]
    flags: Tuple[str, ...] = ()

    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.covariance), 0.0))

    def predict(self, design: np.ndarray) -> np.ndarray:
        return expit(np.asarray(design, dtype=float) @ self.coefficients)


def _logistic_loglik(design: np.ndarray, target: np.ndarray, beta: np.ndarray) -> float:
    eta = design @ beta
    return float(np.sum(target * eta - np.logaddexp(0.0, eta)))


def with_intercept(features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features.reshape(-1, 1)
    return np.column_stack([np.ones(features.shape[0]), features])


def logistic_irls(features: np.ndarray, target: np.ndarray, add_intercept: bool = True) -> LogisticFit:
    """
    Maximum-likelihood logistic regression by iteratively reweighted least squares.

    Newton steps are halved until the log-likelihood does not decrease.
    Converges when max |score| < 1e-8, else stops after 50 iterations.

    Raises:
        SeparationError: no convergence with some |coefficient| > 30, or fitted
            probabilities that reproduce the target exactly
        RankDeficiencyError: design without full column rank
    """
    design = with_intercept(features) if add_intercept else np.asarray(features, dtype=float)
    if design.ndim == 1:
        design = design.reshape(-1, 1)
    target = np.asarray(target, dtype=float).ravel()
    n, k = design.shape
    if target.shape[0] != n:
        raise DataValidationError("target length differs from the design rows")
    if not is_binary_column(target):
        raise DataValidationError("logistic regression target must be binary (0/1)")
    if n <= k:
        raise DataValidationError(f"logistic regression needs more rows ({n}) than coefficients ({k})")
    if np.linalg.matrix_rank(design) < k:
        raise RankDeficiencyError("logistic regression design is rank deficient")

    beta = np.zeros(k)
    loglik = _logistic_loglik(design, target, beta)
    path = [loglik]
    converged = False
    iterations = 0
    for iterations in range(1, IRLS_MAX_ITER + 1):
        prob = expit(design @ beta)
        score = design.T @ (target - prob)
        if np.max(np.abs(score)) < IRLS_TOLERANCE:
            converged = True
            iterations -= 1
            break
        weights = prob * (1.0 - prob)
        information = design.T @ (design * weights[:, None])
        try:
            step = np.linalg.solve(information, score)
        except np.linalg.LinAlgError:
            break
        candidate = beta + step
        new_loglik = _logistic_loglik(design, target, candidate)
        halvings = 0
        while new_loglik < loglik and halvings < 30:
            step = step / 2.0
            candidate = beta + step
            new_loglik = _logistic_loglik(design, target, candidate)
            halvings += 1
        if new_loglik < loglik:
            break
        beta, loglik = candidate, new_loglik
        path.append(loglik)
    else:
        prob = expit(design @ beta)
        converged = bool(np.max(np.abs(design.T @ (target - prob))) < IRLS_TOLERANCE)

    prob = expit(design @ beta)
    large = bool(np.max(np.abs(beta)) > SEPARATION_THRESHOLD)
    if (large and not converged) or np.all(np.abs(target - prob) < 1e-6):
        raise SeparationError("complete separation detected (diverging coefficients)")
    flags: List[str] = []
    if not converged:
        logger.warning(f"IRLS did not converge after {iterations} iterations")
        flags.append("not_converged")
    if large:
        logger.warning(f"IRLS converged with a coefficient above {SEPARATION_THRESHOLD:g} in magnitude")
        flags.append("large_coefficients")

    information = design.T @ (design * (prob * (1.0 - prob))[:, None])
    try:
        covariance = np.linalg.inv(information)
    except np.linalg.LinAlgError as exc:
        raise SeparationError("information matrix is singular (separation)") from exc
    return LogisticFit(
        coefficients=beta,
        covariance=covariance,
        converged=converged,
        iterations=iterations,
        log_likelihood=tuple(path),
        flags=tuple(flags),
    )


# --- 2x2 measures, stratified effects, heterogeneity -----------------------

@dataclass(frozen=True)
class Measure:
    estimate: float
    lower: float
    upper: float

    def formatted(self, digits: int = 3) -> str:
        return format_estimate(self.estimate, self.lower, self.upper, digits)


@dataclass(frozen=True)
class TwoByTwo:
    risk_difference: Measure
    risk_ratio: Measure
    odds_ratio: Measure
    flags: Tuple[str, ...] = ()


def _log_scale_measure(estimate: float, variance_terms: Sequence[float]) -> Measure:
    if any(term <= 0 for term in variance_terms) or estimate <= 0 or not np.isfinite(estimate):
        return Measure(estimate, 0.0, math.inf)
    se = math.sqrt(sum(1.0 / term for term in variance_terms))
    return Measure(estimate, math.exp(math.log(estimate) - Z_95 * se), math.exp(math.log(estimate) + Z_95 * se))


def two_by_two_measures(exposed_n: int, exposed_events: int, unexposed_n: int, unexposed_events: int) -> TwoByTwo:
    """
    Risk difference, risk ratio and odds ratio with Wald 95% intervals.

    Zero cells are not corrected: the affected ratio gets the interval
    (0, inf) and a zero_cell flag.
    """
    n1, a, n0, c = int(exposed_n), int(exposed_events), int(unexposed_n), int(unexposed_events)
    if n1 < 1 or n0 < 1:
        raise DataValidationError("each arm needs at least one unit")
    if not (0 <= a <= n1 and 0 <= c <= n0):
        raise DataValidationError("event counts must lie between 0 and the arm size")
    p1, p0 = a / n1, c / n0
    rd_se = math.sqrt(p1 * (1 - p1) / n1 + p0 * (1 - p0) / n0)
    rd = Measure(p1 - p0, p1 - p0 - Z_95 * rd_se, p1 - p0 + Z_95 * rd_se)

    flags = []
    if min(a, n1 - a, c, n0 - c) == 0:
        flags.append("zero_cell")

    if c == 0:
        rr = Measure(math.inf if a > 0 else math.nan, 0.0, math.inf)
    elif a == 0:
        rr = Measure(0.0, 0.0, math.inf)
    else:
        rr_se = math.sqrt(1 / a - 1 / n1 + 1 / c - 1 / n0)
        est = p1 / p0
        rr = Measure(est, math.exp(math.log(est) - Z_95 * rr_se), math.exp(math.log(est) + Z_95 * rr_se))

    b, d = n1 - a, n0 - c
    if min(a, b, c, d) == 0:
        numerator, denominator = a * d, b * c
        if denominator == 0:
            est = math.inf if numerator > 0 else math.nan
        else:
            est = numerator / denominator
        odds = Measure(est, 0.0, math.inf)
    else:
        odds = _log_scale_measure(a * d / (b * c), (a, b, c, d))
    return TwoByTwo(rd, rr, odds, tuple(flags))


@dataclass(frozen=True)
class CochranQ:
    q: float
    df: int
    p_value: float


def cochran_q(estimates: Sequence[float], std_errors: Sequence[float]) -> CochranQ:
    """Inverse-variance weighted heterogeneity statistic with a chi-squared(K-1) p-value."""
    theta = np.asarray(estimates, dtype=float)
    se = np.asarray(std_errors, dtype=float)
    if theta.size < 2 or theta.shape != se.shape:
        raise DataValidationError("Cochran's Q needs at least two estimates with matching standard errors")
    if np.any(se <= 0):
        raise DataValidationError("standard errors must be positive")
    w = 1.0 / se ** 2
    pooled = float(np.sum(w * theta) / np.sum(w))
    q = float(np.sum(w * (theta - pooled) ** 2))
    df = theta.size - 1
    return CochranQ(q=q, df=df, p_value=float(stats.chi2.sf(q, df)))


@dataclass(frozen=True)
class StratumEffect:
    label: str
    level: float
    n: int
    log_odds_ratio: float
    std_error: float
    odds_ratio: Measure
    dropped_adjusters: Tuple[str, ...] = ()
    flags: Tuple[str, ...] = ()


def _stratum_label(covariate: str, level: float) -> str:
    return f"{covariate}={level:g}"


def adjusted_odds_ratio(
    data: ObservationalDataset,
    mask: np.ndarray,
    adjusters: Sequence[str],
    label: str,
) -> StratumEffect:
    """Exposure odds ratio from a logistic model on exposure + adjusters within mask."""
    y = data.outcome[mask]
    z = data.exposure[mask]
    if y.size == 0:
        raise DataValidationError(f"{label}: no units")
    if z.min() == z.max():
        raise DataValidationError(f"{label}: needs both exposed and unexposed units")
    if y.min() == y.max():
        raise DataValidationError(f"{label}: outcome has no variation")
    kept, dropped = [], []
    for name in adjusters:
        column = data.column(name)[mask]
        (dropped if np.ptp(column) == 0 else kept).append(name)
    if dropped:
        logger.warning(f"{label}: dropping constant adjusters {', '.join(dropped)}")
    columns = [z] + [data.column(name)[mask] for name in kept]
    try:
        fit = logistic_irls(np.column_stack(columns), y)
    except SeparationError as exc:
        raise SeparationError(f"{label}: complete separation detected") from exc
    except RankDeficiencyError as exc:
        raise RankDeficiencyError(f"{label}: {exc}") from exc
    beta = float(fit.coefficients[1])
    se = float(fit.std_errors()[1])
    return StratumEffect(
        label=label,
        level=math.nan,
        n=int(mask.sum()),
        log_odds_ratio=beta,
        std_error=se,
        odds_ratio=Measure(math.exp(beta), math.exp(beta - Z_95 * se), math.exp(beta + Z_95 * se)),
        dropped_adjusters=tuple(dropped),
        flags=fit.flags,
    )


def _require_binary_outcome(data: ObservationalDataset) -> None:
    if data.outcome_kind != BINARY:
        raise DataValidationError("the traditional comparison needs a binary outcome")


def stratified_cate(data: ObservationalDataset, stratum: str,
                    adjust: Optional[Sequence[str]] = None) -> List[StratumEffect]:
    """Per-level adjusted odds ratios for the stratum covariate."""
    _require_binary_outcome(data)
    values = data.column(stratum)
    adjusters = [n for n in data.covariate_names if n != stratum] if adjust is None else list(adjust)
    if stratum in adjusters:
        raise DataValidationError("the stratum covariate cannot also be an adjuster")
    effects = []
    for level in np.unique(values):
        label = _stratum_label(stratum, float(level))
        effect = adjusted_odds_ratio(data, values == level, adjusters, f"stratum {label}")
        effects.append(replace(effect, label=label, level=float(level)))
    return effects


@dataclass(frozen=True)
class ComparisonColumn:
    label: str
    n: int
    measures: TwoByTwo
    adjusted_odds_ratio: Measure


@dataclass(frozen=True)
class TraditionalReport:
    stratum: str
    columns: Tuple[ComparisonColumn, ...]
    heterogeneity: Optional[CochranQ]
    flags: Tuple[str, ...] = ()

    def table(self, digits: int = 3) -> pd.DataFrame:
        """Table-4 shaped frame: one row per measure, one column per sample."""
        frame = {"Measure": ["Risk Difference (95% CI)", "Risk Ratio (95% CI)", "(C)ATE, odds ratio (95% CI)"]}
        for column in self.columns:
            frame[column.label] = [
                column.measures.risk_difference.formatted(digits),
                column.measures.risk_ratio.formatted(digits),
                column.adjusted_odds_ratio.formatted(digits),
            ]
        table = pd.DataFrame(frame)
        if self.heterogeneity is not None:
            q = self.heterogeneity
            row = {"Measure": "Cochran's chi-squared test"}
            for column in self.columns:
                row[column.label] = "" if column.label == "Full Sample" else f"{q.q:.3f} ({format_p(q.p_value)})"
            table = pd.concat([table, pd.DataFrame([row])], ignore_index=True)
        return table


def _arm_counts(data: ObservationalDataset, mask: np.ndarray) -> TwoByTwo:
    y, z = data.outcome[mask], data.exposure[mask]
    exposed, unexposed = z == 1, z == 0
    return two_by_two_measures(int(exposed.sum()), int(y[exposed].sum()), int(unexposed.sum()), int(y[unexposed].sum()))


def traditional_comparison(data: ObservationalDataset, stratum: str) -> TraditionalReport:
    """
    Full-sample and per-level RD, RR and covariate-adjusted OR, plus one
    Cochran's Q over the per-level log odds ratios.
    """
    _require_binary_outcome(data)
    values = data.column(stratum)
    everyone = np.ones(data.n, dtype=bool)
    full = adjusted_odds_ratio(data, everyone, list(data.covariate_names), "Full Sample")
    columns = [ComparisonColumn("Full Sample", data.n, _arm_counts(data, everyone), full.odds_ratio)]
    flags = list(columns[0].measures.flags)

    strata = stratified_cate(data, stratum)
    for effect in strata:
        mask = values == effect.level
        measures = _arm_counts(data, mask)
        flags.extend(f"{effect.label}:{flag}" for flag in measures.flags)
        columns.append(ComparisonColumn(effect.label, effect.n, measures, effect.odds_ratio))

    heterogeneity = None
    if len(strata) >= 2:
        heterogeneity = cochran_q([e.log_odds_ratio for e in strata], [e.std_error for e in strata])
    else:
        logger.warning(f"Stratum covariate {stratum!r} has a single level; no heterogeneity test")
        flags.append("single_level")
    return TraditionalReport(stratum=stratum, columns=tuple(columns), heterogeneity=heterogeneity, flags=tuple(flags))


def format_estimate(estimate: Optional[float], lower: Optional[float], upper: Optional[float],
                    digits: int = 3) -> str:
    """'est (lo, hi)' with fixed decimals; infinities print as inf."""
    def fmt(value: Optional[float]) -> str:
        if value is None or math.isnan(value):
            return "NA"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{value:.{digits}f}"

    return f"{fmt(estimate)} ({fmt(lower)}, {fmt(upper)})"


def format_p(p_value: float) -> str:
    return "< 0.001" if p_value < 0.001 else f"{p_value:.3f}"
