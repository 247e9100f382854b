"""Error types raised by the estimation services."""


class EmmError(Exception):
    """Base class for every failure the toolkit reports on purpose."""


class DataValidationError(EmmError, ValueError):
    """A dataset, schema or synthetic spec breaks its invariants."""


class ConfigError(EmmError, ValueError):
    """The pipeline configuration is unusable."""


class EstimationError(EmmError, RuntimeError):
    """A numerical procedure could not produce an estimate."""


class PositivityError(EstimationError):
    """No exposure variation where an effect must be estimated."""


class SeparationError(EstimationError):
    """Logistic regression coefficients diverge."""


class RankDeficiencyError(EstimationError):
    """A regression design matrix does not have full column rank."""
