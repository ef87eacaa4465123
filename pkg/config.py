"""
Pipeline configuration: a KEY=VALUE file read with python-decouple, with
every parameter defaulting to ``settings`` and CLI flags taking precedence.
"""
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from decouple import Config, Csv, RepositoryEnv

import settings
from stopsafe.exceptions import ConfigError

logger = logging.getLogger(__name__)

STAGE_ORDER = ("intersections", "cgm", "fusion", "encounters", "models", "influence")
DEPENDENCIES = {
    "intersections": (),
    "cgm": (),
    "fusion": ("cgm",),
    "encounters": ("intersections", "fusion"),
    "models": ("encounters",),
    "influence": ("models",),
}
OUTPUT_FORMATS = ("csv", "parquet")

# Input files each stage reads; the auxiliary tables back every data stage
AUX_INPUTS = ("detections_path", "intersections_path", "roster_path")
STAGE_INPUTS = {
    "intersections": AUX_INPUTS,
    "cgm": ("cgm_path",) + AUX_INPUTS,
    "fusion": ("telemetry_path",) + AUX_INPUTS,
    "encounters": ("telemetry_path",) + AUX_INPUTS,
    "models": (),
    "influence": (),
}


@dataclass(frozen=True)
class Parameter:
    cast: Callable[[Any], Any]
    default: Any
    valid: Callable[[Any], bool]
    rule: str


def _positive(value) -> bool:
    return value > 0


def _fraction(value) -> bool:
    return 0 <= value <= 1


PARAMETERS: dict[str, Parameter] = {
    "eps": Parameter(float, settings.DBSCAN_EPS, _positive, "> 0"),
    "min_pts": Parameter(int, settings.DBSCAN_MIN_PTS, lambda v: v >= 1, ">= 1"),
    "merge_radius": Parameter(float, settings.MERGE_RADIUS, _positive, "> 0"),
    "geomedian_tol": Parameter(float, settings.GEOMEDIAN_TOL, _positive, "> 0"),
    "geomedian_max_iter": Parameter(
        int, settings.GEOMEDIAN_MAX_ITER, lambda v: v >= 1, ">= 1"
    ),
    "cgm_rate_window_s": Parameter(int, settings.CGM_RATE_WINDOW_S, _positive, "> 0"),
    "cgm_max_rate": Parameter(float, settings.CGM_MAX_RATE, _positive, "> 0"),
    "cgm_cadence_s": Parameter(int, settings.CGM_CADENCE_S, _positive, "> 0"),
    "staleness": Parameter(int, settings.GLUCOSE_STALENESS, _positive, "> 0"),
    "discard_threshold": Parameter(
        float, settings.DISCARD_THRESHOLD, _fraction, "in [0, 1]"
    ),
    "capture_radius": Parameter(float, settings.CAPTURE_RADIUS, _positive, "> 0"),
    "refractory_s": Parameter(int, settings.REFRACTORY_S, lambda v: v >= 0, ">= 0"),
    "v_stop_eps": Parameter(float, settings.V_STOP_EPS, _positive, "> 0"),
    "min_stop_s": Parameter(float, settings.MIN_STOP_S, _positive, "> 0"),
    "no_stop_ratio": Parameter(
        float, settings.NO_STOP_RATIO, lambda v: 0 < v <= 1, "in (0, 1]"
    ),
    "glmm_tol": Parameter(float, settings.GLMM_TOL, _positive, "> 0"),
    "glmm_max_iter": Parameter(int, settings.GLMM_MAX_ITER, lambda v: v >= 1, ">= 1"),
    "lrt_alpha": Parameter(float, settings.LRT_ALPHA, lambda v: 0 < v < 1, "in (0, 1)"),
    "cooks_threshold": Parameter(float, settings.COOKS_THRESHOLD, _positive, "> 0"),
    "max_workers": Parameter(int, settings.MAX_WORKERS, lambda v: v >= 1, ">= 1"),
}

PATH_KEYS = (
    "telemetry_path",
    "cgm_path",
    "detections_path",
    "intersections_path",
    "annotations_path",
    "roster_path",
)


@dataclass(frozen=True)
class PipelineConfig:
    telemetry_path: Path | None = None
    cgm_path: Path | None = None
    detections_path: Path | None = None
    intersections_path: Path | None = None
    annotations_path: Path | None = None
    roster_path: Path | None = None
    output_path: Path = settings.DEFAULT_OUTPUT_PATH
    output_format: str = settings.DEFAULT_OUTPUT_FORMAT
    stages: tuple[str, ...] = STAGE_ORDER
    params: dict[str, Any] = field(
        default_factory=lambda: {name: p.default for name, p in PARAMETERS.items()}
    )

    def __getattr__(self, name: str):
        # Parameters read like attributes: config.eps, config.capture_radius, ...
        params = self.__dict__.get("params", {})
        if name in params:
            return params[name]
        raise AttributeError(name)

    def with_overrides(self, **overrides) -> "PipelineConfig":
        """Copy with non-None overrides applied; unknown keys are parameters."""
        known = {f.name for f in fields(self)}
        top = {k: v for k, v in overrides.items() if k in known and v is not None}
        params = dict(self.params)
        for key, value in overrides.items():
            if key in known or value is None:
                continue
            if key not in PARAMETERS:
                raise ConfigError(f"Unknown configuration key [{key}]")
            params[key] = PARAMETERS[key].cast(value)
        if "stages" in top:
            top["stages"] = tuple(top["stages"])
        if "output_path" in top:
            top["output_path"] = Path(top["output_path"])
        return replace(self, params=params, **top)


def closure(stages: Iterable[str]) -> tuple[str, ...]:
    """Stages plus everything they depend on, in execution order."""
    needed: set[str] = set()
    pending = list(stages)
    while pending:
        stage = pending.pop()
        if stage not in DEPENDENCIES:
            raise ConfigError(f"Unknown stage [{stage}]; expected one of {STAGE_ORDER}")
        if stage not in needed:
            needed.add(stage)
            pending.extend(DEPENDENCIES[stage])
    return tuple(s for s in STAGE_ORDER if s in needed)


def load_config(path: Path | str) -> PipelineConfig:
    """
    Reads a pipeline configuration file.

    Keys are upper-case: TELEMETRY_PATH, CGM_PATH, DETECTIONS_PATH,
    INTERSECTIONS_PATH, ANNOTATIONS_PATH (optional), ROSTER_PATH, OUTPUT_PATH,
    OUTPUT_FORMAT, STAGES (comma separated) and one key per parameter
    (EPS, MIN_PTS, CAPTURE_RADIUS, ...). Relative paths resolve against the
    directory of the file. As with decouple, process environment variables of
    the same name take precedence over the file.

    :raises ConfigError: If the file is missing or a value does not parse.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Configuration file [{path}] does not exist")

    source = Config(RepositoryEnv(str(path)))
    base = path.resolve().parent

    def resolve(value: str) -> Path | None:
        if not value:
            return None
        candidate = Path(value)
        return candidate if candidate.is_absolute() else base / candidate

    try:
        paths = {key: resolve(source(key.upper(), default="")) for key in PATH_KEYS}
        output = resolve(source("OUTPUT_PATH", default="")) or settings.DEFAULT_OUTPUT_PATH
        params = {
            name: source(name.upper(), default=p.default, cast=p.cast)
            for name, p in PARAMETERS.items()
        }
        stages = tuple(
            source("STAGES", default=",".join(STAGE_ORDER), cast=Csv(post_process=tuple))
        )
        output_format = source("OUTPUT_FORMAT", default=settings.DEFAULT_OUTPUT_FORMAT)
    except ValueError as exc:
        raise ConfigError(f"Invalid value in [{path}]: {exc}") from exc

    logger.info(f"Loaded pipeline configuration from [{path}]")
    return PipelineConfig(
        **paths,
        output_path=output,
        output_format=output_format,
        stages=stages,
        params=params,
    )


def validate(config: PipelineConfig) -> PipelineConfig:
    """
    :raises ConfigError: Naming the offending key, for an unknown or
        dependency-incomplete stage list, a parameter out of range, an unknown
        output format or a missing input file.
    """
    if not config.stages:
        raise ConfigError("STAGES is empty")
    for stage in config.stages:
        if stage not in DEPENDENCIES:
            raise ConfigError(f"STAGES: unknown stage [{stage}]; expected one of {STAGE_ORDER}")
    if missing := [s for s in closure(config.stages) if s not in config.stages]:
        raise ConfigError(
            f"STAGES: {list(config.stages)} also needs {missing} to run"
        )

    for name, parameter in PARAMETERS.items():
        value = config.params[name]
        if not parameter.valid(value):
            raise ConfigError(f"{name.upper()}={value} must be {parameter.rule}")

    if config.output_format not in OUTPUT_FORMATS:
        raise ConfigError(
            f"OUTPUT_FORMAT=[{config.output_format}] must be one of {OUTPUT_FORMATS}"
        )

    required = {key for stage in config.stages for key in STAGE_INPUTS[stage]}
    for key in PATH_KEYS:
        value = getattr(config, key)
        if key in required and value is None:
            raise ConfigError(f"{key.upper()} is required by stages {list(config.stages)}")
        if value is not None and not Path(value).is_file():
            raise ConfigError(f"{key.upper()}=[{value}] does not exist")

    return replace(config, stages=tuple(s for s in STAGE_ORDER if s in config.stages))


def write_config(path: Path, values: Mapping[str, Any]) -> Path:
    """Writes a KEY=VALUE configuration file readable by :func:`load_config`."""
    path = Path(path)
    lines = []
    for key, value in values.items():
        if isinstance(value, (list, tuple)):
            value = ",".join(map(str, value))
        lines.append(f"{key.upper()}={value}")
    path.write_text("\n".join(lines) + "\n")
    return path
