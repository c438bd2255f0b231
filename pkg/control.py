"""
Closed-loop quality control.

Forward and inverse process models (neural nets over cycle records), the
cycle-to-cycle inverse-model adjuster, in-cycle pressure-profile regulation,
individuals SPC charts and the SPC-vs-network part classification comparison.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Mapping, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from artifacts import write_csv
from errors import InferenceError, RangeError, ShapeError, StateError
from metrology import ChronogramPlan, average_trace, default_plan, measure_cycle
from nnet import Network, Topology, TrainConfig, TrainingHistory, forward, init, split_indices, train
from plant import (
    PARAM_FIELDS,
    QUALITY_FIELDS,
    ControllerHook,
    CycleRecord,
    CycleTrace,
    DisturbanceProfile,
    PartQuality,
    Plant,
    ProcessParams,
    clamp_to_ranges,
    cycle_seed,
    nominal_quality,
)

logger = logging.getLogger("control")

SIGMA_FLOOR = 1e-12
D2_INDIVIDUALS = 1.128
RMS_THRESHOLD = 0.07
DEFAULT_GAIN = 0.7
MIN_CYCLES = 30

Rationale = Literal["inverse_step", "regulation", "hold"]


class Tolerances(BaseModel):
    """Relative half-widths of the tolerance bands and the controlled characteristic vector."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    mass: float = Field(0.01, gt=0, description="relative half-width, ±1 %")
    dimension: float = Field(0.005, gt=0, description="relative half-width for every dimension, ±0.5 %")
    defect_limit: float = Field(0.5, gt=0, le=1)
    controlled: tuple[str, ...] = ("mass", "length", "width_a", "width_b")

    def half_width(self, name: str) -> float:
        return self.mass if name == "mass" else self.dimension


def normalized_errors(measured: PartQuality, target: PartQuality, tolerances: Tolerances | None = None) -> np.ndarray:
    """(measured - target) / band width, band width = 2 * half_width * target, per controlled characteristic."""
    tolerances = tolerances or Tolerances()
    return np.array(
        [
            (getattr(measured, n) - getattr(target, n)) / (2.0 * tolerances.half_width(n) * getattr(target, n))
            for n in tolerances.controlled
        ]
    )


def rms(errors: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(errors))))


def conforms(quality: PartQuality, target: PartQuality, tolerances: Tolerances | None = None) -> bool:
    """Every characteristic within its band and defect score below the limit."""
    tolerances = tolerances or Tolerances()
    for name in QUALITY_FIELDS[:-1]:
        if abs(getattr(quality, name) - getattr(target, name)) > tolerances.half_width(name) * getattr(target, name):
            return False
    return quality.defect_score < tolerances.defect_limit


def conformity_labels(
    cycles: Sequence[CycleRecord], target: PartQuality, tolerances: Tolerances | None = None
) -> list[bool]:
    """Ground-truth labels from true quality; True means nonconforming."""
    return [not conforms(c.true_quality, target, tolerances) for c in cycles]


# --- process models ---


@dataclass
class ProcessModel:
    """A trained net with named inputs and outputs and its held-out correlation per output."""

    net: Network
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    correlation: dict[str, float] = field(default_factory=dict)
    history: TrainingHistory | None = None

    def predict_vector(self, values: np.ndarray) -> np.ndarray:
        if not self.net.trained:
            raise StateError("process model is not trained")
        return forward(self.net, np.asarray(values, dtype=float))

    def predict(self, source: PartQuality | ProcessParams | Mapping[str, float]) -> dict[str, float]:
        get = source.get if isinstance(source, Mapping) else (lambda n: getattr(source, n))
        return dict(zip(self.outputs, self.predict_vector(np.array([get(n) for n in self.inputs])).tolist()))


def _quality(record: CycleRecord) -> PartQuality:
    return record.measured_quality or record.true_quality


def _check_sufficiency(cycles: Sequence[CycleRecord], varied: Sequence[str]) -> None:
    if len(cycles) < MIN_CYCLES:
        raise InferenceError(f"need >= {MIN_CYCLES} cycles, got {len(cycles)}")
    for name in varied:
        levels = {getattr(c.params, name) for c in cycles}
        if len(levels) < 2:
            raise InferenceError(f"parameter {name} is constant over the dataset; vary it over >= 2 levels")


def _held_out_correlation(net: Network, x: np.ndarray, y: np.ndarray, config: TrainConfig, names: Sequence[str]) -> dict[str, float]:
    _, val_idx = split_indices(len(x), config.validation_fraction, np.random.default_rng(config.seed))
    idx = val_idx if len(val_idx) >= 3 else np.arange(len(x))
    pred = forward(net, x[idx])
    out: dict[str, float] = {}
    for j, name in enumerate(names):
        if np.std(pred[:, j]) == 0 or np.std(y[idx, j]) == 0:
            out[name] = 0.0
        else:
            out[name] = float(np.corrcoef(pred[:, j], y[idx, j])[0, 1])
    return out


def _fit(
    x: np.ndarray,
    y: np.ndarray,
    inputs: Sequence[str],
    outputs: Sequence[str],
    hidden: Sequence[int],
    config: TrainConfig,
) -> ProcessModel:
    topology = Topology((len(inputs), *hidden, len(outputs)))
    net, history = train(init(topology, config.seed), x, y, config)
    model = ProcessModel(net, tuple(inputs), tuple(outputs), history=history)
    model.correlation = _held_out_correlation(net, x, y, config, outputs)
    logger.info("Fitted %s -> %s with %s: held-out correlation %s", ",".join(inputs), ",".join(outputs), topology.label(), model.correlation)
    return model


FORWARD_INPUTS = ("hold_pressure", "melt_temp", "inject_speed")
FORWARD_OUTPUTS = ("mass", "length")
INVERSE_OUTPUTS = ("hold_pressure", "melt_temp")


def model_train_config() -> TrainConfig:
    """Fresh training settings for the process models: long runs with generous early-stopping patience."""
    return TrainConfig(epochs=3000, patience=200)


def fit_forward(
    cycles: Sequence[CycleRecord],
    *,
    inputs: Sequence[str] = FORWARD_INPUTS,
    outputs: Sequence[str] = FORWARD_OUTPUTS,
    hidden: Sequence[int] = (10,),
    config: TrainConfig | None = None,
) -> ProcessModel:
    """Parameters -> quality predictor, trained on measured quality where available."""
    _check_sufficiency(cycles, inputs)
    x = np.array([[getattr(c.params, n) for n in inputs] for c in cycles])
    y = np.array([[getattr(_quality(c), n) for n in outputs] for c in cycles])
    return _fit(x, y, inputs, outputs, hidden, config or model_train_config())


def fit_inverse(
    cycles: Sequence[CycleRecord],
    *,
    quality_fields: Sequence[str] = Tolerances().controlled,
    params: Sequence[str] = INVERSE_OUTPUTS,
    hidden: Sequence[int] = (10,),
    config: TrainConfig | None = None,
) -> ProcessModel:
    """Quality -> parameters that produced it."""
    _check_sufficiency(cycles, params)
    x = np.array([[getattr(_quality(c), n) for n in quality_fields] for c in cycles])
    y = np.array([[getattr(c.params, n) for n in params] for c in cycles])
    return _fit(x, y, quality_fields, params, hidden, config or model_train_config())


def infer_params(inverse: ProcessModel, quality: PartQuality, base: ProcessParams) -> tuple[ProcessParams, bool]:
    """Parameters the inverse model attributes to `quality`, clamped to machine ranges."""
    return clamp_to_ranges(inverse.predict(quality), base)


# --- inverse-model adjustment ---


@dataclass(frozen=True)
class ControlAction:
    cycle_index: int
    old_params: ProcessParams
    new_params: ProcessParams
    rationale: Rationale
    step: dict[str, float] = field(default_factory=dict)
    predicted_quality: PartQuality | None = None
    clamped: bool = False


def _check_gain(gain: float) -> None:
    if not (0.0 < gain <= 1.0):
        raise RangeError(f"gain must be in (0, 1], got {gain}")


def inverse_adjust(
    inverse_net: ProcessModel,
    measured: PartQuality,
    target: PartQuality,
    current: ProcessParams,
    gain: float = DEFAULT_GAIN,
    *,
    cycle_index: int = 0,
    forward_model: ProcessModel | None = None,
    timings: dict[str, float] | None = None,
) -> ControlAction:
    """
    new = current - gain * (inverse(measured) - inverse(target)), clamped to machine ranges.
    When given, timings receives the wall-clock seconds spent in "inference" and "adjust".
    """
    _check_gain(gain)
    if not inverse_net.net.trained:
        raise StateError("inverse model is not trained")
    started = time.perf_counter()
    implied = inverse_net.predict(measured)
    wanted = inverse_net.predict(target)
    inferred = time.perf_counter()
    step = {name: -gain * (implied[name] - wanted[name]) for name in inverse_net.outputs}
    new, clamped = clamp_to_ranges({n: getattr(current, n) + s for n, s in step.items()}, current)
    if clamped:
        logger.warning("Cycle %d: inverse step clamped to machine ranges (%s)", cycle_index, step)
    predicted = None
    if forward_model is not None:
        predicted = target.with_values(**forward_model.predict(new))
    if timings is not None:
        timings["inference"] = inferred - started
        timings["adjust"] = time.perf_counter() - inferred
    return ControlAction(
        cycle_index=cycle_index,
        old_params=current,
        new_params=new,
        rationale="inverse_step",
        step=step,
        predicted_quality=predicted,
        clamped=clamped,
    )


@dataclass
class LogEntry:
    iteration: int
    cycle_index: int
    params: ProcessParams
    measured: PartQuality
    target: PartQuality
    errors: np.ndarray
    rms: float
    action: ControlAction | None = None
    warning: str = ""
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def action_tag(self) -> Rationale:
        return self.action.rationale if self.action is not None else "hold"


@dataclass
class ControlLog:
    """Per-cycle control history. RMS is recomputable from the stored error vectors."""

    controlled: tuple[str, ...]
    entries: list[LogEntry] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def rms_trajectory(self) -> list[float]:
        return [e.rms for e in self.entries]

    @property
    def final(self) -> LogEntry:
        return self.entries[-1]

    def header(self) -> list[str]:
        return [
            "iteration",
            "cycle_index",
            *(f"param_{n}" for n in PARAM_FIELDS),
            *(f"measured_{n}" for n in QUALITY_FIELDS),
            *(f"target_{n}" for n in QUALITY_FIELDS),
            *(f"error_{n}" for n in self.controlled),
            "rms",
            "action",
            "clamped",
        ]

    def rows(self) -> list[list[object]]:
        rows = []
        for e in self.entries:
            rows.append(
                [
                    e.iteration,
                    e.cycle_index,
                    *(getattr(e.params, n) for n in PARAM_FIELDS),
                    *(getattr(e.measured, n) for n in QUALITY_FIELDS),
                    *(getattr(e.target, n) for n in QUALITY_FIELDS),
                    *e.errors.tolist(),
                    e.rms,
                    e.action_tag,
                    bool(e.action is not None and e.action.clamped),
                ]
            )
        return rows

    def write_csv(self, path: str | Path) -> Path:
        return write_csv(path, self.header(), self.rows())


def run_inverse_loop(
    plant: Plant,
    inverse_net: ProcessModel,
    target: PartQuality,
    start_params: ProcessParams,
    max_iters: int = 3,
    gain: float = DEFAULT_GAIN,
    *,
    threshold: float = RMS_THRESHOLD,
    tolerances: Tolerances | None = None,
    plan: ChronogramPlan | None = None,
    disturbance: DisturbanceProfile | None = None,
    plant_seed: int = 0,
    measure_seed: int = 1,
    measurement_noise: bool = True,
    forward_model: ProcessModel | None = None,
) -> ControlLog:
    """
    Iteration 0 measures the part made at start_params. Each further iteration applies the
    previous adjustment, runs one cycle and measures it. Stops once RMS < threshold or after max_iters.
    """
    _check_gain(gain)
    if max_iters < 0:
        raise RangeError(f"max_iters must be >= 0, got {max_iters}")
    tolerances = tolerances or Tolerances()
    plan = plan or default_plan()
    disturbance = disturbance or DisturbanceProfile.none()
    log = ControlLog(controlled=tolerances.controlled)
    params = start_params
    rises = 0
    for k in range(max_iters + 1):
        record = plant.run_cycle(params, disturbance.resolve(k), cycle_seed(plant_seed, k), cycle_index=k)
        record = measure_cycle(record, plan, cycle_seed(measure_seed, k), noise=measurement_noise)
        errors = normalized_errors(record.measured_quality, target, tolerances)
        value = rms(errors)
        entry = LogEntry(k, record.cycle_index, params, record.measured_quality, target, errors, value)
        if log.entries:
            rises = rises + 1 if value > log.entries[-1].rms else 0
            if rises >= 2:
                entry.warning = f"RMS increased twice in a row (iteration {k}, RMS {value:.4f})"
                log.warnings.append(entry.warning)
                logger.warning("Possible oscillation: %s", entry.warning)
        log.entries.append(entry)
        if value < threshold or k == max_iters:
            break
        entry.action = inverse_adjust(
            inverse_net,
            record.measured_quality,
            target,
            params,
            gain,
            cycle_index=k,
            forward_model=forward_model,
            timings=entry.timings,
        )
        params = entry.action.new_params
    logger.info("Inverse loop: RMS %s", ", ".join(f"{v:.4f}" for v in log.rms_trajectory()))
    return log


def make_inverse_hook(
    inverse_net: ProcessModel, target: PartQuality, gain: float = DEFAULT_GAIN
) -> ControllerHook:
    """Controller hook for Plant.run_sequence: adjusts after every measured cycle."""
    _check_gain(gain)

    def hook(history: list[CycleRecord]) -> ProcessParams:
        last = history[-1]
        return inverse_adjust(inverse_net, _quality(last), target, last.params, gain, cycle_index=last.cycle_index).new_params

    return hook


# --- in-cycle profile regulation ---


class RegulatorGains(BaseModel):
    """Fallback proportional law on phase-averaged profile errors (bar)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    k_pressure: float = Field(1.0, gt=0, description="bar of hold pressure per bar of profile error")
    k_temperature: float = Field(1.5, gt=0, description="°C of melt set-point per bar of profile error")
    holding_share: float = Field(0.8, ge=0, le=1, description="weight of the holding-phase error on hold pressure")
    window: int = Field(20, ge=1, description="samples per averaged profile point")


PHASES = ("injection", "holding", "cooling", "idle")


def window_phases(trace: CycleTrace, window: int) -> np.ndarray:
    """Phase index (into PHASES) of every averaged window, by the phase of its midpoint sample."""
    n_points = trace.n_samples // window
    mid = np.arange(n_points) * window + window / 2.0
    return np.searchsorted(np.asarray(trace.phase_marks[1:], dtype=float), mid, side="right")


def profile_errors(reference: np.ndarray, measured: np.ndarray, phases: np.ndarray) -> dict[str, float]:
    """Mean (reference - measured) over the windows of each phase."""
    if reference.shape != measured.shape:
        raise ShapeError(f"averaged profile length {measured.shape} does not match reference {reference.shape}")
    diff = reference - measured
    return {name: float(diff[phases == i].mean()) if np.any(phases == i) else 0.0 for i, name in enumerate(PHASES)}


def fallback_correction(errors: Mapping[str, float], gains: RegulatorGains) -> dict[str, float]:
    share = gains.holding_share
    e_h, e_i = errors["holding"], errors["injection"]
    return {
        "hold_pressure": gains.k_pressure * (share * e_h + (1.0 - share) * e_i),
        "melt_temp": -gains.k_temperature * ((1.0 - share) * e_h + share * e_i),
    }


REGULATOR_INPUTS = ("injection", "holding", "cooling")


def fit_regulator(
    plant: Plant,
    reference_params: ProcessParams,
    *,
    n_cycles: int = 200,
    pressure_span: float = 60.0,
    temperature_span: float = 15.0,
    window: int = 20,
    seed: int = 0,
    hidden: Sequence[int] = (6,),
    config: TrainConfig | None = None,
) -> ProcessModel:
    """
    Train a net from phase-averaged profile errors to the set-point correction that
    restores the reference profile, by perturbing hold pressure and melt temperature
    around the reference point.
    """
    rng = np.random.default_rng(seed)
    reference = plant.run_cycle(reference_params, rng_seed=cycle_seed(seed, 0))
    ref_avg = average_trace(reference.trace, window)
    phases = window_phases(reference.trace, window)
    x, y = [], []
    for i in range(n_cycles):
        d_p, d_t = rng.uniform(-1, 1, size=2) * (pressure_span, temperature_span)
        params, _ = clamp_to_ranges(
            {
                "hold_pressure": reference_params.hold_pressure + d_p,
                "melt_temp": reference_params.melt_temp + d_t,
            },
            reference_params,
        )
        record = plant.run_cycle(params, rng_seed=cycle_seed(seed, i + 1), cycle_index=i)
        errs = profile_errors(ref_avg, average_trace(record.trace, window), phases)
        x.append([errs[n] for n in REGULATOR_INPUTS])
        y.append([reference_params.hold_pressure - params.hold_pressure, reference_params.melt_temp - params.melt_temp])
    return _fit(np.array(x), np.array(y), REGULATOR_INPUTS, INVERSE_OUTPUTS, hidden, config or model_train_config())


def regulate_profile(
    reference: CycleTrace,
    plant: Plant,
    n_cycles: int,
    disturbance: DisturbanceProfile | None = None,
    *,
    start_params: ProcessParams | None = None,
    gains: RegulatorGains | None = None,
    regulator: ProcessModel | None = None,
    regulator_gain: float = DEFAULT_GAIN,
    target: PartQuality | None = None,
    tolerances: Tolerances | None = None,
    seed: int = 0,
) -> ControlLog:
    """
    Each cycle: average the measured pressure profile, compare it to the averaged reference
    per phase and move hold_pressure and melt_temp so the next profile tracks the reference.
    A trained regulator network replaces the fallback proportional law when given.
    """
    if n_cycles < 1:
        raise RangeError(f"n_cycles must be >= 1, got {n_cycles}")
    gains = gains or RegulatorGains()
    tolerances = tolerances or Tolerances()
    disturbance = disturbance or DisturbanceProfile.none()
    target = target or nominal_quality(Plant(plant.coefficients, noise=False))
    params = start_params or ProcessParams()
    ref_avg = average_trace(reference, gains.window)
    phases = window_phases(reference, gains.window)
    log = ControlLog(controlled=tolerances.controlled)
    for i in range(n_cycles):
        record = plant.run_cycle(params, disturbance.resolve(i), cycle_seed(seed, i), cycle_index=i)
        errs = profile_errors(ref_avg, average_trace(record.trace, gains.window), phases)
        if regulator is not None:
            predicted = regulator.predict({n: errs[n] for n in REGULATOR_INPUTS})
            correction = {n: regulator_gain * v for n, v in predicted.items()}
        else:
            correction = fallback_correction(errs, gains)
        new, clamped = clamp_to_ranges({n: getattr(params, n) + v for n, v in correction.items()}, params)
        if clamped:
            logger.warning("Cycle %d: regulation step clamped to machine ranges", i)
        action = ControlAction(i, params, new, "regulation", step=correction, clamped=clamped)
        quality = _quality(record)
        errors = normalized_errors(quality, target, tolerances)
        log.entries.append(LogEntry(i, i, params, quality, target, errors, rms(errors), action))
        params = new
    return log


# --- statistical process control ---


@dataclass(frozen=True, eq=False)
class SpcChart:
    """Individuals chart; limits at center ± k * sigma with sigma = MR-bar / 1.128."""

    center: float
    sigma: float
    ucl: float
    lcl: float
    values: np.ndarray
    out_of_control: np.ndarray

    @property
    def alarm_rate(self) -> float:
        return float(np.mean(self.out_of_control)) if len(self.values) else 0.0

    def scores(self) -> np.ndarray:
        """Distance from the center line in sigma units."""
        return np.abs(self.values - self.center) / self.sigma


def spc_chart(feature_series: Sequence[float], baseline_n: int, *, k: float = 3.0) -> SpcChart:
    if baseline_n < 20:
        raise RangeError(f"baseline_n must be >= 20, got {baseline_n}")
    values = np.asarray(feature_series, dtype=float)
    if len(values) < baseline_n:
        raise RangeError(f"series of {len(values)} points is shorter than the baseline ({baseline_n})")
    base = values[:baseline_n]
    center = float(base.mean())
    sigma = max(float(np.mean(np.abs(np.diff(base)))) / D2_INDIVIDUALS, SIGMA_FLOOR)
    ucl, lcl = center + k * sigma, center - k * sigma
    return SpcChart(center, sigma, ucl, lcl, values, (values > ucl) | (values < lcl))


# --- part classification ---


@dataclass
class PartClassifier:
    """Network scoring nonconformity from the averaged pressure profile."""

    model: ProcessModel
    window: int = 20
    threshold: float = 0.5

    def features(self, cycles: Sequence[CycleRecord]) -> np.ndarray:
        return np.array([average_trace(c.trace, self.window) for c in cycles])

    def scores(self, cycles: Sequence[CycleRecord]) -> np.ndarray:
        x = self.features(cycles)
        if x.shape[1] != self.model.net.topology.n_inputs:
            raise ShapeError(f"profile has {x.shape[1]} points, classifier expects {self.model.net.topology.n_inputs}")
        return self.model.predict_vector(x)[:, 0]


def fit_classifier(
    cycles: Sequence[CycleRecord],
    labels: Sequence[bool],
    *,
    window: int = 20,
    hidden: Sequence[int] = (6,),
    config: TrainConfig | None = None,
) -> PartClassifier:
    if len(labels) != len(cycles):
        raise RangeError("one label per cycle required")
    x = np.array([average_trace(c.trace, window) for c in cycles])
    y = np.array([[1.0 if bad else 0.0] for bad in labels])
    names = tuple(f"p{i}" for i in range(x.shape[1]))
    config = config or TrainConfig(epochs=500, patience=50)
    return PartClassifier(_fit(x, y, names, ("nonconforming",), hidden, config), window)


@dataclass(frozen=True)
class MethodResult:
    """Confusion counts at the default threshold plus the matched-detection operating point."""

    tp: int
    fp: int
    tn: int
    fn: int
    matched_threshold: float
    matched_detection: float
    matched_fp_rate: float

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / max(self.tp + self.fp + self.tn + self.fn, 1)

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0

    @property
    def fp_rate(self) -> float:
        return self.fp / max(self.fp + self.tn, 1)

    @property
    def detection_rate(self) -> float:
        return self.tp / max(self.tp + self.fn, 1)

    def as_dict(self) -> dict[str, float]:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "fp_rate": self.fp_rate,
            "detection_rate": self.detection_rate,
            "matched_threshold": self.matched_threshold,
            "matched_detection": self.matched_detection,
            "matched_fp_rate": self.matched_fp_rate,
        }


@dataclass(frozen=True)
class ComparisonReport:
    network: MethodResult
    spc: MethodResult
    n_cycles: int
    n_nonconforming: int
    detection_target: float

    def as_dict(self) -> dict[str, object]:
        return {
            "network": self.network.as_dict(),
            "spc": self.spc.as_dict(),
            "n_cycles": self.n_cycles,
            "n_nonconforming": self.n_nonconforming,
            "detection_target": self.detection_target,
        }


def _confusion(flags: np.ndarray, labels: np.ndarray) -> tuple[int, int, int, int]:
    return (
        int(np.sum(flags & labels)),
        int(np.sum(flags & ~labels)),
        int(np.sum(~flags & ~labels)),
        int(np.sum(~flags & labels)),
    )


def matched_operating_point(scores: np.ndarray, labels: np.ndarray, detection_target: float) -> tuple[float, float, float]:
    """
    Highest threshold (flag when score >= threshold) whose detection rate reaches the target.
    Returns (threshold, detection, fp_rate). With no nonconforming parts every threshold detects trivially.
    """
    bad = labels.sum()
    good = (~labels).sum()
    for threshold in np.unique(scores)[::-1]:
        flags = scores >= threshold
        detection = float(np.sum(flags & labels) / bad) if bad else 1.0
        if detection >= detection_target:
            return float(threshold), detection, float(np.sum(flags & ~labels) / max(good, 1))
    return -math.inf, 1.0, 1.0


def _method(scores: np.ndarray, flags: np.ndarray, labels: np.ndarray, detection_target: float) -> MethodResult:
    tp, fp, tn, fn = _confusion(flags, labels)
    threshold, detection, fp_rate = matched_operating_point(scores, labels, detection_target)
    return MethodResult(tp, fp, tn, fn, threshold, detection, fp_rate)


def classify_parts(
    classifier_net: PartClassifier,
    cycles: Sequence[CycleRecord],
    labels: Sequence[bool] | None,
    *,
    spc_baseline_n: int = 100,
    spc_k: float = 3.0,
    detection_target: float = 0.8,
) -> ComparisonReport:
    """
    Score the same stream with the network (full averaged profile) and with an individuals
    chart on peak mold pressure. labels: True for nonconforming parts.
    """
    if not cycles:
        raise RangeError("empty cycle stream")
    if labels is None or len(labels) != len(cycles) or any(lab is None for lab in labels):
        raise RangeError("every cycle needs a conformity label")
    truth = np.array([bool(lab) for lab in labels])
    nn_scores = classifier_net.scores(cycles)
    chart = spc_chart([c.trace.peak_pressure for c in cycles], spc_baseline_n, k=spc_k)
    report = ComparisonReport(
        network=_method(nn_scores, nn_scores >= classifier_net.threshold, truth, detection_target),
        spc=_method(chart.scores(), chart.out_of_control, truth, detection_target),
        n_cycles=len(cycles),
        n_nonconforming=int(truth.sum()),
        detection_target=detection_target,
    )
    logger.info(
        "Classification: network FP rate %.4f, SPC FP rate %.4f at matched detection >= %.2f",
        report.network.matched_fp_rate,
        report.spc.matched_fp_rate,
        detection_target,
    )
    return report
