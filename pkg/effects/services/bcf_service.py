"""Bayesian causal forest: a prognostic and an effect ensemble fit in one chain."""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from effects.exceptions import DataValidationError, EstimationError
from effects.services.analysis_service import IteVector, config_digest
from effects.services.bart_service import (
    BartConfig,
    TreeEnsemble,
    draw_sigma,
    least_squares_sigma,
    progress_range,
    sigma_prior_scale,
)
from effects.services.dataset_service import BINARY, ObservationalDataset

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BcfConfig:
    num_trees_mu: int = 200
    num_trees_tau: int = 50
    alpha: float = 0.95
    beta: float = 2.0
    k: float = 2.0
    nu: float = 3.0
    q: float = 0.9
    mu_leaf_scale: Optional[float] = None
    tau_leaf_scale: Optional[float] = None
    burn_in: int = 500
    draws: int = 500
    seed: int = 0
    include_pihat: bool = True
    tau_max_depth: Optional[int] = None
    mu_covariates: Optional[Tuple[str, ...]] = None
    tau_covariates: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        if self.num_trees_mu < 1 or self.num_trees_tau < 1:
            raise DataValidationError("both ensembles need at least one tree")
        if self.burn_in < 0 or self.draws < 1:
            raise DataValidationError("burn_in must be >= 0 and draws >= 1")
        for name in ("mu_leaf_scale", "tau_leaf_scale"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise DataValidationError(f"{name} must be positive")

    def mu_scale(self) -> float:
        if self.mu_leaf_scale is not None:
            return self.mu_leaf_scale
        return 0.5 / (self.k * math.sqrt(self.num_trees_mu))

    def tau_scale(self) -> float:
        """Half the default rule for the effect ensemble's tree count."""
        if self.tau_leaf_scale is not None:
            return self.tau_leaf_scale
        return 0.5 * 0.5 / (self.k * math.sqrt(self.num_trees_tau))

    def ensemble_config(self, max_depth: Optional[int] = None) -> BartConfig:
        return BartConfig(alpha=self.alpha, beta=self.beta, k=self.k, nu=self.nu, q=self.q,
                          burn_in=self.burn_in, draws=self.draws, seed=self.seed, max_depth=max_depth)


@dataclass(eq=False)
class BcfModel:
    mu_draws: np.ndarray
    tau_draws: np.ndarray
    sigma_draws: np.ndarray
    pihat: np.ndarray
    config: BcfConfig
    outcome_kind: str
    covariate_names: Tuple[str, ...]
    flags: List[str] = field(default_factory=list)


def _select(data: ObservationalDataset, names: Optional[Sequence[str]]) -> np.ndarray:
    if names is None:
        return np.asarray(data.covariates, dtype=float)
    return np.column_stack([data.column(name) for name in names])


def fit_bcf(data: ObservationalDataset, pihat: np.ndarray, config: BcfConfig = BcfConfig()) -> BcfModel:
    """
    Fit y = mu(x, pihat) + tau(x) z + e with both ensembles updated every
    iteration and one sigma draw from the joint residual.

    Binary outcomes are modelled as numeric 0/1 so tau is a risk difference.
    """
    pihat = np.asarray(pihat, dtype=float).ravel()
    if pihat.shape[0] != data.n:
        raise DataValidationError(f"pihat has {pihat.shape[0]} values for {data.n} units")
    if not np.all((pihat > 0.0) & (pihat < 1.0)):
        raise DataValidationError("pihat must lie strictly inside (0, 1)")

    flags: List[str] = []
    if data.outcome_kind == BINARY:
        flags.append("gaussian_bcf_on_binary")
    mu_features = _select(data, config.mu_covariates)
    if config.include_pihat:
        mu_features = np.column_stack([mu_features, pihat])
    else:
        flags.append("pihat_excluded")
    tau_features = _select(data, config.tau_covariates)
    z = np.asarray(data.exposure, dtype=float)

    outcome = np.asarray(data.outcome, dtype=float)
    low, high = float(outcome.min()), float(outcome.max())
    center = 0.5 * (low + high)
    scale = high - low if high > low else 1.0
    target = (outcome - center) / scale

    rng = np.random.default_rng(config.seed)
    mu = TreeEnsemble(mu_features, config.num_trees_mu, config.mu_scale(), config.ensemble_config(), rng)
    tau = TreeEnsemble(
        tau_features, config.num_trees_tau, config.tau_scale(), config.ensemble_config(config.tau_max_depth), rng,
        basis=z, test_features=tau_features, test_basis=np.ones(data.n),
    )
    sigma = least_squares_sigma(np.column_stack([mu_features, z]), target)
    lam = sigma_prior_scale(sigma, config.nu, config.q)
    if config.burn_in == 0:
        logger.warning("BCF run without burn-in; early draws are kept")
        flags.append("no_burn_in")

    mu_draws = np.empty((config.draws, data.n))
    tau_draws = np.empty((config.draws, data.n))
    sigma_draws = np.empty(config.draws)
    logger.info(f"BCF chain: trees mu={config.num_trees_mu}, tau={config.num_trees_tau}, "
                f"burn_in={config.burn_in}, draws={config.draws}, n={data.n}")
    for it in progress_range(config.burn_in + config.draws, "bcf"):
        mu.sweep(target - tau.fit, sigma)
        tau.sweep(target - mu.fit, sigma)
        sigma = draw_sigma(target - mu.fit - tau.fit, config.nu, lam, rng)
        if not (np.all(np.isfinite(mu.fit)) and np.all(np.isfinite(tau.test_fit))):
            raise EstimationError(f"non-finite BCF fit at iteration {it}")
        k = it - config.burn_in
        if k >= 0:
            mu_draws[k] = mu.fit * scale + center
            tau_draws[k] = tau.test_fit * scale
            sigma_draws[k] = sigma * scale
    logger.info(f"BCF chain finished; acceptance mu={mu.acceptance_rates()}, tau={tau.acceptance_rates()}")
    return BcfModel(
        mu_draws=mu_draws,
        tau_draws=tau_draws,
        sigma_draws=sigma_draws,
        pihat=pihat,
        config=config,
        outcome_kind=data.outcome_kind,
        covariate_names=tuple(data.covariate_names),
        flags=flags,
    )


def predict_ite_bcf(model: BcfModel) -> IteVector:
    """Posterior mean of tau per unit with 2.5/97.5 percentile bounds."""
    estimates = model.tau_draws.mean(axis=0)
    lower, upper = np.percentile(model.tau_draws, [2.5, 97.5], axis=0)
    flags = list(model.flags)
    if model.outcome_kind == BINARY and np.any(np.abs(estimates) > 1.0):
        flags.append("ite_clipped")
        estimates = np.clip(estimates, -1.0, 1.0)
    return IteVector(
        estimates=estimates,
        method="bcf",
        seed=model.config.seed,
        config_digest=config_digest(model.config),
        lower=lower,
        upper=upper,
        outcome_kind=model.outcome_kind,
        flags=tuple(flags),
    )


def posterior_ate(model: BcfModel) -> Tuple[float, float]:
    """Mean and sd over draws of the per-draw average effect."""
    per_draw = model.tau_draws.mean(axis=1)
    sd = float(per_draw.std(ddof=1)) if per_draw.size > 1 else 0.0
    return float(per_draw.mean()), sd
