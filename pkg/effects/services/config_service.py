"""Service to parse flat dotted key-value pipeline configs into frozen dataclasses."""
import dataclasses
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Union

from django.conf import settings

from effects.exceptions import ConfigError, DataValidationError
from effects.services.bart_service import BartConfig
from effects.services.bcf_service import BcfConfig
from effects.services.dataset_service import BINARY, OUTCOME_KINDS, ColumnSchema, SyntheticSpec, TauRule
from effects.services.grf_service import GrfConfig

logger = logging.getLogger(__name__)

KNOWN_METHODS = ("grf", "bart", "bcf", "traditional")
AUTO = "auto"


@dataclass(frozen=True)
class AnalysisConfig:
    fit_the_fit_depth: int = 3
    min_leaf_fraction: float = 0.05
    # "auto" picks covariates whose variable importance exceeds 10%
    projection_modifiers: Union[str, Tuple[str, ...]] = AUTO
    importance_cutoff: float = 0.10
    stratify: Optional[str] = None
    subgroups: Optional[Tuple[str, ...]] = None
    bins: int = 20


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one end-to-end run needs; unrelated to process-level settings."""
    methods: Tuple[str, ...]
    source: str = "synthetic"
    csv_path: Optional[str] = None
    schema: Optional[ColumnSchema] = None
    synthetic: Optional[SyntheticSpec] = None
    grf: GrfConfig = field(default_factory=GrfConfig)
    bart: BartConfig = field(default_factory=BartConfig)
    bcf: BcfConfig = field(default_factory=BcfConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    output_dir: str = "emm_output"
    seed: int = 0
    parallel_methods: bool = False
    export_draws: bool = False

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("at least one method is required")
        unknown = [m for m in self.methods if m not in KNOWN_METHODS]
        if unknown:
            raise ConfigError(f"unknown method(s): {', '.join(unknown)}; expected a subset of {', '.join(KNOWN_METHODS)}")
        if self.source not in ("csv", "synthetic"):
            raise ConfigError(f"unknown data source {self.source!r}; expected csv or synthetic")
        if self.source == "csv" and (self.csv_path is None or self.schema is None):
            raise ConfigError("csv source needs data.path, data.outcome and data.exposure")
        if self.source == "synthetic" and self.synthetic is None:
            raise ConfigError("synthetic source needs synthetic.n and synthetic.p")


def parse_pairs(text: str) -> Dict[str, str]:
    """'key = value' lines; '#' starts a comment; later keys override earlier ones."""
    pairs: Dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {number}: empty key")
        pairs[key] = value
    return pairs


def _as_bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _as_list(value: str) -> Tuple[str, ...]:
    return tuple(item.strip() for item in value.split(",") if item.strip())


def _as_floats(value: str) -> Tuple[float, ...]:
    return tuple(float(item) for item in _as_list(value))


def _coercer(annotation: Any) -> Callable[[str], Any]:
    """Build a str -> value converter from a dataclass field annotation."""
    origin = typing.get_origin(annotation)
    if origin is Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        inner = _coercer(args[0]) if len(args) == 1 else (lambda v: v)
        return lambda v: None if v.lower() in ("none", "") else inner(v)
    if origin in (tuple, Tuple):
        item = typing.get_args(annotation)[0]
        convert = _coercer(item)
        return lambda v: tuple(convert(x) for x in _as_list(v))
    if annotation is bool:
        return _as_bool
    if annotation is int:
        return int
    if annotation is float:
        return float
    return str


def _section(cls, prefix: str, pairs: Dict[str, str], used: set, exclude=()) -> Dict[str, Any]:
    hints = typing.get_type_hints(cls)
    values = {}
    for f in dataclasses.fields(cls):
        key = f"{prefix}.{f.name}"
        if key not in pairs or f.name in exclude:
            continue
        used.add(key)
        try:
            values[f.name] = _coercer(hints[f.name])(pairs[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {pairs[key]!r} ({exc})") from exc
    return values


def _synthetic_index(value: str, key: str) -> int:
    """Covariate reference as a synthetic name (x3) or 1-based index (3)."""
    text = value.strip().lower()
    if text.startswith("x"):
        text = text[1:]
    try:
        index = int(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected a covariate like x1, got {value!r}") from exc
    if index < 1:
        raise ConfigError(f"{key}: covariate numbering starts at 1")
    return index - 1


def _synthetic_spec(pairs: Dict[str, str], used: set, seed: int) -> SyntheticSpec:
    def take(key: str, convert, default=None):
        full = f"synthetic.{key}"
        if full not in pairs:
            return default
        used.add(full)
        try:
            return convert(pairs[full])
        except ValueError as exc:
            raise ConfigError(f"{full}: cannot parse {pairs[full]!r} ({exc})") from exc

    kind = take("tau.kind", str, "constant")
    if kind == "constant":
        rule = TauRule.constant(take("tau.value", float, 0.0))
    elif kind == "modifier":
        covariate = take("tau.covariate", str, "x1")
        rule = TauRule.modifier(
            _synthetic_index(covariate, "synthetic.tau.covariate"),
            take("tau.base", float, 0.0),
            take("tau.modified", float, 0.0),
        )
    else:
        raise ConfigError(f"synthetic.tau.kind: unknown rule {kind!r}; expected constant or modifier")

    n = take("n", int)
    p = take("p", int)
    if n is None or p is None:
        raise ConfigError("synthetic source needs synthetic.n and synthetic.p")
    confounder = take("confounder", str, "x1")
    try:
        return SyntheticSpec(
            n=n,
            p=p,
            prevalences=take("prevalences", _as_floats, (0.5,)),
            baseline_risk=take("baseline_risk", float, 0.2),
            tau_rule=rule,
            confounding_strength=take("confounding_strength", float, 0.0),
            noise_sd=take("noise_sd", float, 0.0),
            seed=take("seed", int, seed),
            outcome_kind=take("outcome_kind", str, BINARY),
            exposure_rate=take("exposure_rate", float, 0.5),
            confounder=_synthetic_index(confounder, "synthetic.confounder"),
            covariate_effects=take("covariate_effects", _as_floats),
        )
    except DataValidationError as exc:
        raise ConfigError(f"synthetic: {exc}") from exc


def build_config(pairs: Dict[str, str], overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """
    Turn parsed pairs into a PipelineConfig. Unknown keys and uncoercible
    values raise ConfigError. overrides (seed, output_dir, parallel_methods)
    take precedence over file values.
    """
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    used: set = set()

    def scalar(key: str, convert, default):
        if key not in pairs:
            return default
        used.add(key)
        try:
            return convert(pairs[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {pairs[key]!r} ({exc})") from exc

    seed = overrides.get("seed", scalar("seed", int, 0))
    if "seed" in overrides:
        used.add("seed")
    methods = scalar("methods", _as_list, ("grf", "bart", "bcf", "traditional"))
    output_dir = overrides.get("output_dir", scalar("output.dir", str, getattr(settings, "EMM_OUTPUT_DIR", "emm_output")))
    parallel = overrides.get("parallel_methods", scalar("parallel_methods", _as_bool, False))
    export_draws = scalar("output.export_draws", _as_bool, False)
    source = scalar("data.source", str, "csv" if "data.path" in pairs else "synthetic")

    csv_path, schema, synthetic = None, None, None
    if source == "csv":
        csv_path = scalar("data.path", str, None)
        outcome_kind = scalar("data.outcome_kind", str, None)
        if outcome_kind is not None and outcome_kind not in OUTCOME_KINDS:
            raise ConfigError(f"data.outcome_kind: unknown kind {outcome_kind!r}")
        outcome = scalar("data.outcome", str, None)
        exposure = scalar("data.exposure", str, None)
        if outcome is None or exposure is None:
            raise ConfigError("csv source needs data.outcome and data.exposure")
        schema = ColumnSchema(
            outcome=outcome,
            exposure=exposure,
            covariates=scalar("data.covariates", _as_list, None),
            outcome_kind=outcome_kind,
        )
    elif source == "synthetic":
        synthetic = _synthetic_spec(pairs, used, seed)

    try:
        grf = GrfConfig(**_section(GrfConfig, "grf", pairs, used))
        bart = BartConfig(**_section(BartConfig, "bart", pairs, used, exclude=("seed",)))
        bcf = BcfConfig(**_section(BcfConfig, "bcf", pairs, used, exclude=("seed",)))
        analysis_values = _section(AnalysisConfig, "analysis", pairs, used, exclude=("projection_modifiers",))
        if "analysis.projection_modifiers" in pairs:
            used.add("analysis.projection_modifiers")
            value = pairs["analysis.projection_modifiers"].strip()
            analysis_values["projection_modifiers"] = AUTO if value.lower() == AUTO else _as_list(value)
        analysis = AnalysisConfig(**analysis_values)
    except DataValidationError as exc:
        raise ConfigError(str(exc)) from exc

    unknown = sorted(set(pairs) - used)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")

    return PipelineConfig(
        methods=tuple(methods),
        source=source,
        csv_path=csv_path,
        schema=schema,
        synthetic=synthetic,
        grf=grf,
        bart=bart,
        bcf=bcf,
        analysis=analysis,
        output_dir=output_dir,
        seed=int(seed),
        parallel_methods=bool(parallel),
        export_draws=bool(export_draws),
    )


def load_config(path: Optional[str] = None, text: Optional[str] = None,
                overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """Read a config file (or literal text) and build the pipeline config."""
    if text is None:
        if path is None:
            raise ConfigError("a config path or text is required")
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = config_path.read_text(encoding="utf-8")
    config = build_config(parse_pairs(text), overrides)
    logger.info(f"Loaded config: methods={','.join(config.methods)}, source={config.source}, seed={config.seed}")
    return config


def config_to_dict(config: PipelineConfig) -> Dict[str, Any]:
    return dataclasses.asdict(config)
