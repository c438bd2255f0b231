"""Scenario configuration for moldpilot: YAML file, strict pydantic validation, process-wide settings."""
from __future__ import annotations

from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from control import RegulatorGains, Tolerances, model_train_config
from errors import ConfigError, MissingSeedError, RangeError, UnknownKeyError
from metrology import SCHEDULE_TOLERANCE, Instrument, default_catalog
from nnet import Activation, RecurrenceKind, TrainConfig
from plant import PARAM_FIELDS, PLANT_MODEL_VERSION, DisturbanceProfile, Plant, PlantCoefficients, ProcessParams

TOOLKIT_VERSION = "0.1.0"

ScenarioKind = Literal[
    "screen", "train-forward", "train-inverse", "tune-topology", "closed-loop", "regulate", "spc-compare"
]


class ToolkitSettings(BaseSettings):
    """Process-wide settings from the environment. None are required."""

    model_config = SettingsConfigDict(env_prefix="MOLDPILOT_", extra="ignore")

    debug: bool = Field(default=False, description="Log at DEBUG level. Or set MOLDPILOT_DEBUG=1.")
    log_level: str = Field(default="INFO", description="Root log level when not in debug mode")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DisturbanceSpec(_Section):
    kind: Literal["none", "step", "ramp", "batch-change"] = "none"
    target: Literal["melt_temp_offset", "viscosity_factor", "checkring_leak"] = "melt_temp_offset"
    magnitude: float = 0.0
    onset_cycle: int = 0
    slope: float = 0.0
    batch_length: int = 50

    def to_profile(self) -> DisturbanceProfile:
        return DisturbanceProfile(**self.model_dump())


def _default_ranges() -> dict[str, tuple[float, float]]:
    return {
        "hold_pressure": (300.0, 500.0),
        "melt_temp": (220.0, 240.0),
        "inject_speed": (30.0, 70.0),
        "hold_time": (3.0, 7.0),
        "cool_time": (10.0, 20.0),
        "mold_temp": (30.0, 50.0),
    }


def _screen_ranges() -> dict[str, tuple[float, float]]:
    # Narrow melt and speed levels keep the viscosity x speed peak interaction,
    # aliased at +-1/3 into every 12-run column, below the trace noise.
    return {**_default_ranges(), "melt_temp": (227.0, 233.0), "inject_speed": (45.0, 55.0)}


class DesignSpec(_Section):
    """Screening design. Factor names that are not process parameters stay inert placeholders."""

    factors: list[str] = Field(
        default_factory=lambda: [
            "hold_pressure", "melt_temp", "inject_speed", "hold_time", "cool_time", "mold_temp",
            "inert_1", "inert_2", "inert_3", "inert_4", "inert_5",
        ]
    )
    n_runs: int | None = None
    replicates: int = Field(2, ge=1)
    alpha: float = Field(0.001, gt=0, lt=1)
    response: Literal["peak_pressure", "mass"] = "peak_pressure"
    ranges: dict[str, tuple[float, float]] = Field(default_factory=_screen_ranges)


class DatasetSpec(_Section):
    """Training data: a full factorial over `factors`, repeated until n_cycles runs are collected."""

    n_cycles: int = Field(162, ge=30)
    factors: list[str] = Field(default_factory=lambda: ["hold_pressure", "melt_temp", "inject_speed"])
    levels: Literal[2, 3] = 3
    ranges: dict[str, tuple[float, float]] = Field(default_factory=_default_ranges)
    random: bool = Field(False, description="uniform random sampling inside ranges instead of the factorial")


class NetworkSpec(_Section):
    hidden: list[int] = Field(default_factory=lambda: [10])
    activation: Activation = "tanh"
    recurrence: RecurrenceKind = "none"
    context_decay: float = 0.5
    context_mix: float = 0.5
    input_lags: int = 1
    output_lags: int = 1
    sequence_length: int = Field(10, ge=1, description="JE conditioning steps per training sequence")
    max_hidden: int = Field(12, ge=1)
    search_patience: int = Field(2, ge=1)
    prune_alpha: float = Field(0.05, gt=0, lt=1)
    compare_depth: bool = True
    train: TrainConfig = Field(default_factory=model_train_config)


class LoopSpec(_Section):
    max_iters: int = Field(3, ge=0)
    gain: float = Field(0.7, gt=0, le=1)
    threshold: float = Field(0.07, gt=0)
    start_offsets: dict[str, float] = Field(default_factory=lambda: {"hold_pressure": -40.0, "melt_temp": 10.0})
    controlled_params: list[str] = Field(default_factory=lambda: ["hold_pressure", "melt_temp"])
    training_cycles: int = Field(200, ge=30)
    training_ranges: dict[str, tuple[float, float]] = Field(
        default_factory=lambda: {"hold_pressure": (300.0, 500.0), "melt_temp": (215.0, 245.0)}
    )


class RegulationSpec(_Section):
    gains: RegulatorGains = Field(default_factory=RegulatorGains)
    use_network: bool = False
    training_cycles: int = Field(200, ge=30)
    steady_state_cycles: int = Field(10, ge=1)


class SpcSpec(_Section):
    baseline_n: int = Field(100, ge=20)
    k: float = Field(3.0, gt=0)
    detection_target: float = Field(0.8, gt=0, le=1)
    training_cycles: int = Field(600, ge=30)
    hidden: list[int] = Field(default_factory=lambda: [6])


class ScenarioConfig(_Section):
    """One scenario run. seed is mandatory; everything else has an embedded default."""

    kind: ScenarioKind
    seed: int = Field(ge=0, lt=2**64)
    output_dir: str = "out"
    n_cycles: int = Field(60, ge=1)
    noise: bool = Field(True, description="plant trace noise and process jitter")
    measurement_noise: bool = True
    plant_model_version: str = PLANT_MODEL_VERSION
    plant: PlantCoefficients = Field(default_factory=PlantCoefficients)
    instruments: dict[str, Instrument] = Field(default_factory=default_catalog)
    idle_window: tuple[float, float] = Field((18.0, 30.0), description="s; measurement window of the nominal cycle")
    tolerances: Tolerances = Field(default_factory=Tolerances)
    disturbance: DisturbanceSpec = Field(default_factory=DisturbanceSpec)
    design: DesignSpec = Field(default_factory=DesignSpec)
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    network: NetworkSpec = Field(default_factory=NetworkSpec)
    loop: LoopSpec = Field(default_factory=LoopSpec)
    regulation: RegulationSpec = Field(default_factory=RegulationSpec)
    spc: SpcSpec = Field(default_factory=SpcSpec)

    def echo(self) -> dict[str, Any]:
        """Resolved config (defaults filled in) for reports."""
        return self.model_dump(mode="json")


def _raise_validation(err: ValidationError) -> None:
    for item in err.errors():
        if item["type"] == "extra_forbidden":
            raise UnknownKeyError(".".join(str(p) for p in item["loc"])) from None
    first = err.errors()[0]
    where = ".".join(str(p) for p in first["loc"]) or "<root>"
    raise ConfigError(f"invalid value at {where}: {first['msg']}") from None


def parse_config(raw: Any) -> ScenarioConfig:
    """Validate an already-parsed document."""
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a mapping")
    if raw.get("seed") is None:
        raise MissingSeedError()
    try:
        config = ScenarioConfig.model_validate(raw)
    except ValidationError as e:
        _raise_validation(e)
    if config.plant_model_version != PLANT_MODEL_VERSION:
        raise ConfigError(
            f"plant_model_version {config.plant_model_version!r} does not match embedded model {PLANT_MODEL_VERSION!r}"
        )
    try:
        config.disturbance.to_profile()
    except RangeError as e:
        raise ConfigError(f"invalid disturbance: {e}") from e
    for section, mapping in (
        ("design.ranges", config.design.ranges),
        ("dataset.ranges", config.dataset.ranges),
        ("loop.start_offsets", config.loop.start_offsets),
        ("loop.training_ranges", config.loop.training_ranges),
    ):
        for key in mapping:
            if key not in PARAM_FIELDS:
                raise UnknownKeyError(f"{section}.{key}")
    start, end = config.idle_window
    if not 0 <= start < end:
        raise ConfigError(f"idle_window must satisfy 0 <= start < end, got {config.idle_window}")
    ejection = Plant(config.plant, noise=False).ejection_time(ProcessParams())
    if start < ejection - SCHEDULE_TOLERANCE:
        raise ConfigError(f"idle_window starts at {start} s, before the nominal part is ejected at {ejection:.3f} s")
    return config


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> ScenarioConfig:
    """Read and validate a scenario YAML file. Top-level overrides (e.g. seed from the CLI) win over the file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        problem = getattr(e, "problem", None) or str(e)
        if mark is not None:
            raise ConfigError(f"cannot parse {path.name}: {problem}", line=mark.line + 1, column=mark.column + 1) from e
        raise ConfigError(f"cannot parse {path.name}: {problem}") from e
    if overrides:
        if raw is None:
            raw = {}
        if isinstance(raw, dict):
            raw = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
    return parse_config(raw)


def load_settings() -> ToolkitSettings:
    return ToolkitSettings()
