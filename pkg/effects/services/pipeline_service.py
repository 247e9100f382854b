"""End-to-end orchestration: data, per-method effect estimation, interpretation, reports."""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from effects.exceptions import ConfigError, EmmError, RankDeficiencyError
from effects.services import bart_service, bcf_service, export_service, grf_service, report_service
from effects.services.analysis_service import (
    MAX_SUBGROUP_LEVELS,
    FitTheFitTree,
    IteVector,
    SubgroupSummary,
    TraditionalReport,
    config_digest,
    fit_the_fit,
    logistic_irls,
    subgroup_summary,
    traditional_comparison,
    with_intercept,
)
from effects.services.config_service import AUTO, PipelineConfig
from effects.services.dataset_service import (
    BINARY,
    ObservationalDataset,
    descriptive_summary,
    generate_synthetic,
    load_csv,
)
from effects.services.rng_service import derive_seed

logger = logging.getLogger(__name__)

ESTIMATORS = ("grf", "bart", "bcf")
PIHAT_BOUNDS = (1e-6, 1.0 - 1e-6)


@dataclass
class MethodResult:
    method: str
    seed: int
    ites: IteVector
    ate: Dict[str, float]
    tree: FitTheFitTree
    subgroups: List[SubgroupSummary]
    extras: Dict[str, Any] = field(default_factory=dict)
    flags: List[str] = field(default_factory=list)
    truth_correlation: Optional[float] = None
    draws: Optional[bart_service.PosteriorDraws] = None


@dataclass
class EmmReport:
    config: PipelineConfig
    data: ObservationalDataset
    summary: Any
    methods: Dict[str, MethodResult] = field(default_factory=dict)
    traditional: Optional[TraditionalReport] = None
    failures: List[Dict[str, str]] = field(default_factory=list)
    method_seeds: Dict[str, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures


def load_dataset(config: PipelineConfig) -> Tuple[ObservationalDataset, Optional[np.ndarray]]:
    """The configured dataset, plus true ITEs for synthetic sources."""
    if config.source == "csv":
        return load_csv(config.csv_path, config.schema), None
    return generate_synthetic(config.synthetic)


def stratum_for(config: PipelineConfig, data: ObservationalDataset) -> Optional[str]:
    """Configured stratum, or the synthetic modifier when none is configured."""
    if config.analysis.stratify:
        return config.analysis.stratify
    if config.synthetic is not None and config.synthetic.tau_rule.kind == "modifier":
        return data.covariate_names[config.synthetic.tau_rule.covariate]
    return None


def subgroup_covariates(config: PipelineConfig, data: ObservationalDataset) -> List[str]:
    if config.analysis.subgroups is not None:
        return list(config.analysis.subgroups)
    stratum = stratum_for(config, data)
    if stratum is not None:
        return [stratum]
    return [
        name for j, name in enumerate(data.covariate_names)
        if np.unique(data.covariates[:, j]).size <= MAX_SUBGROUP_LEVELS
    ]


def validate_against_data(config: PipelineConfig, data: ObservationalDataset) -> None:
    """Every column the analysis refers to must exist."""
    names = set(data.covariate_names)
    referenced = list(config.analysis.subgroups or ())
    if config.analysis.stratify:
        referenced.append(config.analysis.stratify)
    if config.analysis.projection_modifiers != AUTO:
        referenced.extend(config.analysis.projection_modifiers)
    referenced.extend(config.bcf.mu_covariates or ())
    referenced.extend(config.bcf.tau_covariates or ())
    missing = sorted(set(referenced) - names)
    if missing:
        raise ConfigError(f"config refers to unknown covariate(s): {', '.join(missing)}")
    if "traditional" in config.methods:
        if data.outcome_kind != BINARY:
            raise ConfigError("the traditional method needs a binary outcome")
        if stratum_for(config, data) is None:
            raise ConfigError("the traditional method needs analysis.stratify")


def prepare_output_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory is not writable: {path}")
    return out


def _clip_binary(estimates: np.ndarray, data: ObservationalDataset, flags: List[str]) -> np.ndarray:
    if data.outcome_kind == BINARY and np.any(np.abs(estimates) > 1.0):
        flags.append("ite_clipped")
        return np.clip(estimates, -1.0, 1.0)
    return estimates


def _run_grf(data: ObservationalDataset, config: PipelineConfig, seed: int):
    model = grf_service.fit_causal_forest(data, config.grf, seed)
    flags = list(model.flags)
    estimates = _clip_binary(model.tau_oob, data, flags)
    ites = IteVector(estimates, "grf", seed, config_digest(config.grf), outcome_kind=data.outcome_kind, flags=tuple(flags))
    ate = asdict(grf_service.average_treatment_effect(model))
    importance = grf_service.variable_importance(model)
    extras: Dict[str, Any] = {
        "calibration": asdict(grf_service.test_calibration(model)),
        "variable_importance": [[name, score] for name, score in importance.ranked()],
    }
    modifiers = config.analysis.projection_modifiers
    if modifiers == AUTO:
        modifiers = tuple(name for name, score in importance.ranked() if score > config.analysis.importance_cutoff)
    if modifiers:
        columns = np.column_stack([data.column(name) for name in modifiers])
        try:
            extras["best_linear_projection"] = asdict(grf_service.best_linear_projection(model, columns, modifiers))
        except RankDeficiencyError as exc:
            logger.warning(f"Best linear projection skipped: {exc}")
            flags.append("projection_rank_deficient")
    else:
        flags.append("no_projection_modifiers")
    return ites, ate, extras, flags, None


def _run_bart(data: ObservationalDataset, config: PipelineConfig, seed: int):
    fit = bart_service.fit_bart(data, replace(config.bart, seed=seed))
    ites = bart_service.estimate_ite_counterfactual(fit, data)
    values = fit.run.test.values
    per_draw = bart_service.inverse_link(fit.run.link, values[:, :data.n]) - bart_service.inverse_link(
        fit.run.link, values[:, data.n:]
    )
    draw_means = per_draw.mean(axis=1)
    sd = float(draw_means.std(ddof=1)) if draw_means.size > 1 else 0.0
    ate = {"estimate": float(draw_means.mean()), "std_error": sd,
           "ci_lower": float(np.percentile(draw_means, 2.5)), "ci_upper": float(np.percentile(draw_means, 97.5))}
    extras = {
        "diagnostics": {
            "link": fit.run.link,
            "num_trees": fit.run.num_trees,
            "leaf_scale": fit.run.sigma_mu,
            "split_half": bart_service.split_half_check(fit.run.train),
            "acceptance": fit.run.acceptance,
        },
    }
    return ites, ate, extras, list(fit.run.flags), fit.run.train


def _run_bcf(data: ObservationalDataset, config: PipelineConfig, seed: int):
    propensity = logistic_irls(data.covariates, data.exposure)
    pihat = np.clip(propensity.predict(with_intercept(data.covariates)), *PIHAT_BOUNDS)
    model = bcf_service.fit_bcf(data, pihat, replace(config.bcf, seed=seed))
    ites = bcf_service.predict_ite_bcf(model)
    mean, sd = bcf_service.posterior_ate(model)
    per_draw = model.tau_draws.mean(axis=1)
    ate = {"estimate": mean, "std_error": sd,
           "ci_lower": float(np.percentile(per_draw, 2.5)), "ci_upper": float(np.percentile(per_draw, 97.5))}
    extras = {"diagnostics": {"propensity_converged": propensity.converged,
                              "pihat_range": [float(pihat.min()), float(pihat.max())]}}
    return ites, ate, extras, list(model.flags), None


RUNNERS = {"grf": _run_grf, "bart": _run_bart, "bcf": _run_bcf}


def estimate_method(method: str, data: ObservationalDataset, config: PipelineConfig,
                    truth: Optional[np.ndarray] = None) -> MethodResult:
    """Fit one estimator and run the shared interpretation steps on its ITEs."""
    seed = derive_seed(config.seed, method)
    logger.info(f"Running {method} (seed {seed})")
    ites, ate, extras, flags, draws = RUNNERS[method](data, config, seed)
    tree = fit_the_fit(ites, data.covariates, data.covariate_names,
                       config.analysis.fit_the_fit_depth, config.analysis.min_leaf_fraction)
    subgroups = [
        subgroup_summary(ites, data.column(name), name, bins=config.analysis.bins)
        for name in subgroup_covariates(config, data)
    ]
    correlation = None
    if truth is not None and np.std(truth) > 0 and np.std(ites.estimates) > 0:
        correlation = float(np.corrcoef(ites.estimates, truth)[0, 1])
    logger.info(f"{method} finished: mean ITE {ites.estimates.mean():.4f}")
    return MethodResult(
        method=method, seed=seed, ites=ites, ate=ate, tree=tree, subgroups=subgroups,
        extras=extras, flags=sorted(set(flags) | set(ites.flags)), truth_correlation=correlation, draws=draws,
    )


def _failure(method: str, exc: Exception) -> Dict[str, str]:
    return {"method": method, "error": type(exc).__name__, "message": str(exc)}


def _guarded(method: str, data, config, truth):
    try:
        return estimate_method(method, data, config, truth), None
    except Exception as exc:  # recorded in the report, not re-raised
        logger.exception(f"{method} failed: {exc}")
        return None, _failure(method, exc)


def run_pipeline(config: PipelineConfig, formats: Sequence[str] = export_service.FORMATS) -> EmmReport:
    """
    Load data, run every requested method, write report.txt, report.json
    and the exports. Method failures land in report.failures; the partial
    report is still written.
    """
    data, truth = load_dataset(config)
    validate_against_data(config, data)
    out = prepare_output_dir(config.output_dir)
    logger.info(f"Dataset ready: n={data.n}, p={data.p}, outcome={data.outcome_kind}")

    report = EmmReport(config=config, data=data, summary=descriptive_summary(data))
    estimators = [m for m in config.methods if m in ESTIMATORS]
    report.method_seeds = {m: derive_seed(config.seed, m) for m in estimators}
    if config.parallel_methods and len(estimators) > 1:
        with ThreadPoolExecutor(max_workers=len(estimators)) as pool:
            outcomes = list(pool.map(lambda m: _guarded(m, data, config, truth), estimators))
    else:
        outcomes = [_guarded(m, data, config, truth) for m in estimators]
    for method, (result, failure) in zip(estimators, outcomes):
        if result is not None:
            report.methods[method] = result
        else:
            report.failures.append(failure)

    if "traditional" in config.methods:
        try:
            report.traditional = traditional_comparison(data, stratum_for(config, data))
        except EmmError as exc:
            logger.exception(f"traditional comparison failed: {exc}")
            report.failures.append(_failure("traditional", exc))

    report_service.write_report(report, out)
    export_service.export_artifacts(report, formats, out)
    if config.export_draws and "bart" in report.methods:
        export_service.write_posterior_draws(report.methods["bart"].draws, out / "bart_draws.csv")
    if report.failures:
        logger.error(f"Pipeline finished with {len(report.failures)} failure(s)")
    else:
        logger.info(f"Pipeline finished; outputs in {out}")
    return report
