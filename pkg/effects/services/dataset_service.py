"""Service to load, validate, synthesize and summarize observational datasets."""
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit, logit

from effects.exceptions import DataValidationError

logger = logging.getLogger(__name__)

BINARY = "binary"
CONTINUOUS = "continuous"
OUTCOME_KINDS = (BINARY, CONTINUOUS)


def _read_only(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def is_binary_column(values: np.ndarray) -> bool:
    """True when every value is exactly 0 or 1."""
    values = np.asarray(values)
    return bool(np.all((values == 0) | (values == 1)))


@dataclass(frozen=True, eq=False)
class ObservationalDataset:
    """
    The (Y, Z, X) triple every estimator consumes.

    Arrays are copied and frozen on construction; a dataset that exists has
    passed validation.
    """
    covariates: np.ndarray
    exposure: np.ndarray
    outcome: np.ndarray
    covariate_names: Tuple[str, ...]
    outcome_kind: str
    outcome_name: str = "y"
    exposure_name: str = "z"

    def __post_init__(self):
        covariates = np.asarray(self.covariates, dtype=float)
        if covariates.ndim == 1:
            covariates = covariates.reshape(-1, 1)
        exposure = np.asarray(self.exposure, dtype=float).ravel()
        outcome = np.asarray(self.outcome, dtype=float).ravel()
        names = tuple(str(name) for name in self.covariate_names)

        n = outcome.shape[0]
        if n < 2:
            raise DataValidationError(f"dataset needs at least 2 rows, got {n}")
        if covariates.ndim != 2 or covariates.shape[0] != n or exposure.shape[0] != n:
            raise DataValidationError("covariates, exposure and outcome must all have length n")
        if covariates.shape[1] < 1:
            raise DataValidationError("at least one covariate column required")
        if len(names) != covariates.shape[1]:
            raise DataValidationError(
                f"{len(names)} covariate names for {covariates.shape[1]} covariate columns"
            )
        if len(set(names)) != len(names):
            raise DataValidationError("covariate names must be unique")
        for label, values in (("covariates", covariates), ("exposure", exposure), ("outcome", outcome)):
            if not np.all(np.isfinite(values)):
                raise DataValidationError(f"{label} contain missing or non-finite values")
        if not is_binary_column(exposure):
            raise DataValidationError("exposure must be binary (0/1)")
        if self.outcome_kind not in OUTCOME_KINDS:
            raise DataValidationError(f"unknown outcome kind: {self.outcome_kind}")
        if self.outcome_kind == BINARY and not is_binary_column(outcome):
            raise DataValidationError("outcome must be binary (0/1) for a binary outcome kind")
        treated = int(exposure.sum())
        if treated == 0 or treated == n:
            raise DataValidationError("at least one exposed and one unexposed unit required")

        object.__setattr__(self, "covariates", _read_only(covariates, float))
        object.__setattr__(self, "exposure", _read_only(exposure, float))
        object.__setattr__(self, "outcome", _read_only(outcome, float))
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return int(self.outcome.shape[0])

    @property
    def p(self) -> int:
        return int(self.covariates.shape[1])

    def covariate_index(self, name: str) -> int:
        try:
            return self.covariate_names.index(name)
        except ValueError:
            raise DataValidationError(f"unknown covariate: {name}") from None

    def column(self, name: str) -> np.ndarray:
        """Look up a covariate, the exposure or the outcome by name."""
        if name == self.outcome_name:
            return self.outcome
        if name == self.exposure_name:
            return self.exposure
        return self.covariates[:, self.covariate_index(name)]


@dataclass(frozen=True)
class ColumnSchema:
    """Column-role assignment for CSV loading."""
    outcome: str
    exposure: str
    covariates: Optional[Tuple[str, ...]] = None
    outcome_kind: Optional[str] = None


def _looks_numeric(cell: str) -> bool:
    try:
        float(cell)
        return True
    except (TypeError, ValueError):
        return False


def load_csv(path: str, schema: ColumnSchema) -> ObservationalDataset:
    """
    Load and validate a comma-delimited file with a header row.

    Args:
        path: CSV file path
        schema: which columns hold the outcome, the exposure and the covariates
            (all remaining columns when covariates is None)

    Returns:
        A validated ObservationalDataset, rows in file order
    """
    if not os.path.isfile(path):
        raise DataValidationError(f"file not found: {path}")

    try:
        raw = pd.read_csv(path, header=None, dtype=str, keep_default_na=False, skip_blank_lines=True)
    except pd.errors.EmptyDataError:
        raise DataValidationError(f"missing header row in {path}") from None
    except pd.errors.ParserError as e:
        raise DataValidationError(f"malformed CSV {path}: {e}") from None

    header = ["" if pd.isna(h) else str(h).strip() for h in raw.iloc[0].tolist()]
    if any(h == "" for h in header):
        raise DataValidationError("missing header name")
    if all(_looks_numeric(h) for h in header):
        raise DataValidationError("missing header row (first row is numeric)")
    seen = set()
    for h in header:
        if h in seen:
            raise DataValidationError(f"duplicate header: {h}")
        seen.add(h)

    body = raw.iloc[1:].reset_index(drop=True)
    body.columns = header

    for role, name in (("outcome", schema.outcome), ("exposure", schema.exposure)):
        if name not in header:
            raise DataValidationError(f"{role} column not found: {name}")
    if schema.outcome == schema.exposure:
        raise DataValidationError("outcome and exposure must be different columns")
    if schema.covariates is None:
        covariate_names = [h for h in header if h not in (schema.outcome, schema.exposure)]
    else:
        covariate_names = list(schema.covariates)
        for name in covariate_names:
            if name not in header:
                raise DataValidationError(f"covariate column not found: {name}")
            if name in (schema.outcome, schema.exposure):
                raise DataValidationError(f"column {name} cannot be both a covariate and the outcome or exposure")
    if not covariate_names:
        raise DataValidationError("at least one covariate column required")
    if len(body) < 2:
        raise DataValidationError(f"dataset needs at least 2 rows, got {len(body)}")

    parsed = {}
    for name in [schema.outcome, schema.exposure] + covariate_names:
        cells = body[name]
        blank = cells.isna() | (cells.fillna("").str.strip() == "")
        if blank.any():
            row = int(np.flatnonzero(blank.to_numpy())[0]) + 1
            raise DataValidationError(f"missing value at row {row} (column '{name}')")
        values = pd.to_numeric(cells.str.strip(), errors="coerce").to_numpy(dtype=float)
        bad = ~np.isfinite(values)
        if bad.any():
            row = int(np.flatnonzero(bad)[0]) + 1
            raise DataValidationError(
                f"non-numeric value {cells.iloc[row - 1]!r} at row {row} (column '{name}')"
            )
        parsed[name] = values

    outcome = parsed[schema.outcome]
    if schema.outcome_kind is not None:
        outcome_kind = schema.outcome_kind
    else:
        outcome_kind = BINARY if is_binary_column(outcome) else CONTINUOUS

    dataset = ObservationalDataset(
        covariates=np.column_stack([parsed[name] for name in covariate_names]),
        exposure=parsed[schema.exposure],
        outcome=outcome,
        covariate_names=tuple(covariate_names),
        outcome_kind=outcome_kind,
        outcome_name=schema.outcome,
        exposure_name=schema.exposure,
    )
    logger.info(f"Loaded {path}: n={dataset.n}, p={dataset.p}, outcome={outcome_kind}")
    return dataset


def write_csv(data: ObservationalDataset, path: str, true_ites: Optional[np.ndarray] = None) -> str:
    """
    Write a dataset in the loader's dialect (outcome, exposure, covariates).

    Binary columns are written as integers. When true_ites is given it goes to
    a sibling ``<stem>.truth.csv`` file.
    """
    columns = {
        data.outcome_name: data.outcome,
        data.exposure_name: data.exposure,
    }
    for j, name in enumerate(data.covariate_names):
        columns[name] = data.covariates[:, j]
    frame = pd.DataFrame({
        name: values.astype(int) if is_binary_column(values) else values
        for name, values in columns.items()
    })
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")

    if true_ites is not None:
        truth_path = str(Path(path).with_suffix("")) + ".truth.csv"
        pd.DataFrame({"true_ite": np.asarray(true_ites, dtype=float)}).to_csv(
            truth_path, index=False, lineterminator="\n"
        )
    logger.info(f"Wrote dataset to {path}")
    return path


@dataclass(frozen=True)
class TauRule:
    """True CATE as a function of one covariate: constant(c) or modifier(j, tau0, tau1)."""
    kind: str = "constant"
    value: float = 0.0
    covariate: int = 0
    base: float = 0.0
    modified: float = 0.0

    @classmethod
    def constant(cls, value: float) -> "TauRule":
        return cls(kind="constant", value=float(value))

    @classmethod
    def modifier(cls, covariate: int, base: float, modified: float) -> "TauRule":
        return cls(kind="modifier", covariate=int(covariate), base=float(base), modified=float(modified))

    def evaluate(self, covariates: np.ndarray) -> np.ndarray:
        covariates = np.asarray(covariates, dtype=float)
        if self.kind == "constant":
            return np.full(covariates.shape[0], self.value, dtype=float)
        x = covariates[:, self.covariate]
        return self.base + (self.modified - self.base) * x

    def levels(self) -> Tuple[float, ...]:
        if self.kind == "constant":
            return (self.value,)
        return (self.base, self.modified)


@dataclass(frozen=True)
class SyntheticSpec:
    """Logistic-exposure, additive-risk data generating process with known ITEs."""
    n: int
    p: int
    prevalences: Tuple[float, ...]
    baseline_risk: float
    tau_rule: TauRule = field(default_factory=TauRule)
    confounding_strength: float = 0.0
    noise_sd: float = 0.0
    seed: int = 0
    outcome_kind: str = BINARY
    exposure_rate: float = 0.5
    confounder: int = 0
    covariate_effects: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.n < 2:
            raise DataValidationError("synthetic n must be at least 2")
        if self.p < 1:
            raise DataValidationError("synthetic p must be at least 1")
        prevalences = tuple(float(v) for v in self.prevalences)
        if len(prevalences) == 1 and self.p > 1:
            prevalences = prevalences * self.p
        if len(prevalences) != self.p:
            raise DataValidationError(f"expected {self.p} prevalences, got {len(prevalences)}")
        if any(not 0.0 < v < 1.0 for v in prevalences):
            raise DataValidationError("prevalences must lie strictly inside (0, 1)")
        object.__setattr__(self, "prevalences", prevalences)

        effects = self.covariate_effects
        effects = (0.0,) * self.p if effects is None else tuple(float(v) for v in effects)
        if len(effects) != self.p:
            raise DataValidationError(f"expected {self.p} covariate effects, got {len(effects)}")
        object.__setattr__(self, "covariate_effects", effects)

        if self.outcome_kind not in OUTCOME_KINDS:
            raise DataValidationError(f"unknown outcome kind: {self.outcome_kind}")
        if not 0.0 < self.exposure_rate < 1.0:
            raise DataValidationError("exposure_rate must lie strictly inside (0, 1)")
        if not 0 <= self.confounder < self.p:
            raise DataValidationError(f"confounder index {self.confounder} out of range")
        if self.tau_rule.kind not in ("constant", "modifier"):
            raise DataValidationError(f"unknown tau rule: {self.tau_rule.kind}")
        if self.tau_rule.kind == "modifier" and not 0 <= self.tau_rule.covariate < self.p:
            raise DataValidationError(f"modifier index {self.tau_rule.covariate} out of range")
        if self.noise_sd < 0:
            raise DataValidationError("noise_sd must be nonnegative")


def _check_risk_bounds(spec: SyntheticSpec) -> None:
    """Every covariate pattern and exposure level must imply a risk in [0, 1]."""
    effects = np.asarray(spec.covariate_effects, dtype=float)
    rule = spec.tau_rule
    modifier = rule.covariate if rule.kind == "modifier" else None
    others = np.delete(effects, modifier) if modifier is not None else effects
    low_rest = float(np.minimum(others, 0.0).sum())
    high_rest = float(np.maximum(others, 0.0).sum())

    for level, tau in enumerate(rule.levels()):
        base = spec.baseline_risk + (effects[modifier] * level if modifier is not None else 0.0)
        lowest = base + low_rest + min(0.0, tau)
        highest = base + high_rest + max(0.0, tau)
        if lowest < 0.0 or highest > 1.0:
            raise DataValidationError(
                f"implied risk outside [0, 1] for some covariate pattern "
                f"(range {lowest:.4f} to {highest:.4f})"
            )


def generate_synthetic(spec: SyntheticSpec) -> Tuple[ObservationalDataset, np.ndarray]:
    """
    Draw a dataset from the SyntheticSpec data generating process.

    Returns:
        (dataset, true per-unit ITEs on the risk-difference / additive scale)
    """
    if spec.outcome_kind == BINARY:
        _check_risk_bounds(spec)

    rng = np.random.default_rng(spec.seed)
    prevalences = np.asarray(spec.prevalences, dtype=float)
    covariates = (rng.random((spec.n, spec.p)) < prevalences).astype(float)

    exposure_logit = logit(spec.exposure_rate) + spec.confounding_strength * covariates[:, spec.confounder]
    exposure = (rng.random(spec.n) < expit(exposure_logit)).astype(float)

    true_ites = spec.tau_rule.evaluate(covariates)
    mean = spec.baseline_risk + covariates @ np.asarray(spec.covariate_effects) + true_ites * exposure

    if spec.outcome_kind == BINARY:
        outcome = (rng.random(spec.n) < mean).astype(float)
    else:
        outcome = mean + spec.noise_sd * rng.standard_normal(spec.n)

    dataset = ObservationalDataset(
        covariates=covariates,
        exposure=exposure,
        outcome=outcome,
        covariate_names=tuple(f"x{j + 1}" for j in range(spec.p)),
        outcome_kind=spec.outcome_kind,
    )
    logger.info(f"Generated synthetic dataset: n={spec.n}, p={spec.p}, tau rule={spec.tau_rule.kind}")
    return dataset, true_ites


def _count_cell(count: int, size: int) -> str:
    pct = round(100.0 * count / size, 1) if size else 0.0
    return f"{count} ({pct:g}%)"


def _mean_cell(values: np.ndarray) -> str:
    if values.size == 0:
        return "-"
    sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return f"{round(float(values.mean()), 3):g} ({round(sd, 3):g})"


def descriptive_summary(data: ObservationalDataset) -> pd.DataFrame:
    """
    Table-2 style descriptive statistics.

    Binary variables are shown as "count (percent%)", continuous ones as
    "mean (sd)". Binary outcomes add Not event / Event columns.
    """
    strata = [("Overall", np.ones(data.n, dtype=bool))]
    if data.outcome_kind == BINARY:
        strata.append(("Not event", data.outcome == 0))
        strata.append(("Event", data.outcome == 1))

    variables = [(data.exposure_name, data.exposure)]
    variables += [(name, data.covariates[:, j]) for j, name in enumerate(data.covariate_names)]

    rows = [{"Variable": "n", **{label: str(int(mask.sum())) for label, mask in strata}}]
    for name, values in variables:
        row = {"Variable": name}
        binary = is_binary_column(values)
        for label, mask in strata:
            if binary:
                row[label] = _count_cell(int(values[mask].sum()), int(mask.sum()))
            else:
                row[label] = _mean_cell(values[mask])
        rows.append(row)

    return pd.DataFrame(rows, columns=["Variable"] + [label for label, _ in strata])


def format_summary_text(summary: pd.DataFrame) -> str:
    return summary.to_string(index=False)


def require_columns(data: ObservationalDataset, names: Sequence[str]) -> None:
    """Raise when any requested column is not part of the dataset."""
    for name in names:
        data.column(name)
