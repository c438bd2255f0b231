"""
Reference injection-molding plant: settable parameters in, in-cycle traces and part quality out.

Phases are evaluated in order (plasticizing, fill, hold, cool, eject) and each one
consumes what the previous phase produced. The quality equations are smooth,
nonlinear and interacting; coefficients live in PlantCoefficients so scenario files
can override them. All randomness comes from the explicit seed.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Literal, Mapping, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from errors import NumericalFaultError, RangeError

logger = logging.getLogger("plant")

PLANT_MODEL_VERSION = "1.1"
SAMPLE_RATE = 100  # Hz, fixed

# Machine ranges for every settable parameter (inclusive)
MACHINE_RANGES: dict[str, tuple[float, float]] = {
    "melt_temp": (200.0, 280.0),
    "hold_pressure": (200.0, 600.0),
    "inject_speed": (10.0, 120.0),
    "hold_time": (1.0, 10.0),
    "cool_time": (5.0, 25.0),
    "mold_temp": (20.0, 80.0),
}
PARAM_FIELDS = tuple(MACHINE_RANGES)
QUALITY_FIELDS = ("mass", "length", "width_a", "width_b", "thickness", "defect_score")
DIMENSION_FIELDS = ("length", "width_a", "width_b", "thickness")

NOMINAL_MELT_TEMP = 230.0
NOMINAL_HOLD_PRESSURE = 400.0
NOMINAL_INJECT_SPEED = 50.0


@dataclass(frozen=True)
class ProcessParams:
    """Settable process parameters. Out-of-range values are rejected at construction."""

    melt_temp: float = NOMINAL_MELT_TEMP
    hold_pressure: float = NOMINAL_HOLD_PRESSURE
    inject_speed: float = NOMINAL_INJECT_SPEED
    hold_time: float = 5.0
    cool_time: float = 11.8
    mold_temp: float = 40.0

    def __post_init__(self) -> None:
        for name, (lo, hi) in MACHINE_RANGES.items():
            value = getattr(self, name)
            try:
                value = float(value)
            except (TypeError, ValueError):
                raise RangeError(f"{name} must be a number, got {value!r}") from None
            if not math.isfinite(value) or value <= 0:
                raise RangeError(f"{name} must be finite and strictly positive, got {value}")
            if value < lo or value > hi:
                raise RangeError(f"{name}={value} outside machine range [{lo}, {hi}]")
            object.__setattr__(self, name, value)

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def with_values(self, **changes: float) -> "ProcessParams":
        return replace(self, **changes)


def clamp_to_ranges(values: Mapping[str, float], base: ProcessParams) -> tuple[ProcessParams, bool]:
    """Apply values onto base, clamping each to its machine range. Returns (params, clamped)."""
    clamped = False
    out: dict[str, float] = {}
    for name, value in values.items():
        lo, hi = MACHINE_RANGES[name]
        if not math.isfinite(value):
            raise NumericalFaultError(f"non-finite value for {name}")
        bounded = min(max(value, lo), hi)
        if bounded != value:
            clamped = True
        out[name] = bounded
    return base.with_values(**out), clamped


@dataclass(frozen=True)
class DisturbanceState:
    """Concrete disturbance values acting on one cycle."""

    melt_temp_offset: float = 0.0
    viscosity_factor: float = 1.0
    checkring_leak: float = 0.0

    def __post_init__(self) -> None:
        for name in ("melt_temp_offset", "viscosity_factor", "checkring_leak"):
            if not math.isfinite(getattr(self, name)):
                raise RangeError(f"disturbance {name} must be finite")
        if self.viscosity_factor <= 0:
            raise RangeError(f"viscosity_factor must be > 0, got {self.viscosity_factor}")
        if self.checkring_leak < 0:
            raise RangeError(f"checkring_leak must be >= 0, got {self.checkring_leak}")


DisturbanceKind = Literal["none", "step", "ramp", "batch-change"]
DisturbanceTarget = Literal["melt_temp_offset", "viscosity_factor", "checkring_leak"]


@dataclass(frozen=True)
class DisturbanceProfile:
    """
    Disturbance schedule over a run.
    step: magnitude from onset_cycle on. ramp: magnitude + slope * (cycle - onset).
    batch-change: magnitude on alternate batches of batch_length cycles, starting disturbed at onset.
    For viscosity_factor the resolved value is added to 1.
    """

    kind: DisturbanceKind = "none"
    target: DisturbanceTarget = "melt_temp_offset"
    magnitude: float = 0.0
    onset_cycle: int = 0
    slope: float = 0.0
    batch_length: int = 50

    def __post_init__(self) -> None:
        if self.kind not in ("none", "step", "ramp", "batch-change"):
            raise RangeError(f"unknown disturbance kind {self.kind!r}")
        if self.target not in ("melt_temp_offset", "viscosity_factor", "checkring_leak"):
            raise RangeError(f"unknown disturbance target {self.target!r}")
        if self.onset_cycle < 0:
            raise RangeError("onset_cycle must be >= 0")
        if self.kind == "ramp" and self.slope == 0:
            raise RangeError("ramp disturbance requires a non-zero slope")
        if self.kind == "none" and self.magnitude != 0:
            raise RangeError("'none' disturbance requires magnitude 0")
        if self.batch_length < 1:
            raise RangeError("batch_length must be >= 1")

    @classmethod
    def none(cls) -> "DisturbanceProfile":
        return cls()

    def value_at(self, cycle_index: int) -> float:
        if self.kind == "none" or cycle_index < self.onset_cycle:
            return 0.0
        k = cycle_index - self.onset_cycle
        if self.kind == "step":
            return self.magnitude
        if self.kind == "ramp":
            return self.magnitude + self.slope * k
        return self.magnitude if (k // self.batch_length) % 2 == 0 else 0.0

    def resolve(self, cycle_index: int) -> DisturbanceState:
        value = self.value_at(cycle_index)
        if self.target == "viscosity_factor":
            return DisturbanceState(viscosity_factor=1.0 + value)
        if self.target == "checkring_leak":
            return DisturbanceState(checkring_leak=value)
        return DisturbanceState(melt_temp_offset=value)


@dataclass(frozen=True)
class PartQuality:
    """Part characteristics: mass in g, dimensions in mm, defect score in [0, 1]."""

    mass: float
    length: float
    width_a: float
    width_b: float
    thickness: float
    defect_score: float = 0.0

    def __post_init__(self) -> None:
        for name in ("mass",) + DIMENSION_FIELDS:
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                raise RangeError(f"{name} must be finite and > 0, got {value}")
        if not 0.0 <= self.defect_score <= 1.0:
            raise RangeError(f"defect_score must be in [0, 1], got {self.defect_score}")

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def vector(self, names: Sequence[str]) -> np.ndarray:
        return np.array([getattr(self, n) for n in names], dtype=float)

    def with_values(self, **changes: float) -> "PartQuality":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class CycleTrace:
    """In-mold pressure (bar) and temperature (°C) sampled at SAMPLE_RATE."""

    mold_pressure: np.ndarray
    mold_temperature: np.ndarray
    phase_marks: tuple[int, ...]
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        if self.sample_rate != SAMPLE_RATE:
            raise RangeError(f"sample_rate is fixed at {SAMPLE_RATE} Hz")
        if self.mold_pressure.shape != self.mold_temperature.shape or self.mold_pressure.ndim != 1:
            raise RangeError("pressure and temperature traces must be 1-D arrays of equal length")
        n = len(self.mold_pressure)
        marks = self.phase_marks
        if any(b <= a for a, b in zip(marks, marks[1:])) or (marks and (marks[0] < 0 or marks[-1] >= n)):
            raise RangeError(f"phase_marks {marks} must be strictly increasing and inside [0, {n})")

    @property
    def n_samples(self) -> int:
        return len(self.mold_pressure)

    @property
    def peak_pressure(self) -> float:
        return float(np.max(self.mold_pressure))

    def with_pressure(self, pressure: np.ndarray) -> "CycleTrace":
        return replace(self, mold_pressure=pressure)


@dataclass(frozen=True)
class ThermalSnapshot:
    """Part surface temperature reduced to two scalars (°C)."""

    mean_surface_temp: float
    max_surface_temp: float


@dataclass(frozen=True, eq=False)
class CycleRecord:
    """One molding cycle. measured_quality and thermal are filled by metrology."""

    cycle_index: int
    params: ProcessParams
    disturbance_state: DisturbanceState
    trace: CycleTrace
    true_quality: PartQuality
    cycle_time: float
    events: dict[str, float] = field(default_factory=dict)
    measured_quality: PartQuality | None = None
    thermal: ThermalSnapshot | None = None

    @property
    def realized_melt_temp(self) -> float:
        return self.params.melt_temp + self.disturbance_state.melt_temp_offset


class ShrinkageTerms(BaseModel):
    """s = base + pressure * tanh(h) + temperature * dT/50 + speed * v."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    base: float
    pressure: float
    temperature: float
    speed: float = 0.0


def _calibrated_temp_coeff() -> float:
    # Full mass equation (quadratic term included) gives exactly -1.27 % at +20 °C
    return (-0.0127 + 0.008 * (20.0 / 50.0) ** 2) / 20.0


class PlantCoefficients(BaseModel):
    """Reference plant coefficients. Overridable from the scenario file."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    nominal_mass: float = Field(5.0, gt=0, description="g")
    nominal_length: float = Field(100.0, gt=0, description="mm, before shrinkage")
    nominal_width_a: float = Field(80.0, gt=0)
    nominal_width_b: float = Field(60.0, gt=0)
    nominal_thickness: float = Field(3.0, gt=0)
    mass_pressure_gain: float = 0.05
    mass_temp_coeff: float = Field(default_factory=_calibrated_temp_coeff, description="per °C")
    mass_interaction: float = 0.01
    mass_temp_curvature: float = 0.008
    viscosity_temp_scale: float = Field(60.0, gt=0, description="°C")
    viscosity_pressure_loss: float = Field(100.0, description="bar lost per unit viscosity-factor excess")
    shrinkage: dict[str, ShrinkageTerms] = Field(
        default_factory=lambda: {
            "length": ShrinkageTerms(base=0.015, pressure=-0.006, temperature=0.004),
            "width_a": ShrinkageTerms(base=0.015, pressure=-0.010, temperature=0.001, speed=-0.002),
            "width_b": ShrinkageTerms(base=0.015, pressure=-0.001, temperature=0.010, speed=0.002),
            "thickness": ShrinkageTerms(base=0.012, pressure=-0.008, temperature=0.002, speed=-0.003),
        }
    )
    defect_offset: float = -6.0
    defect_temp_gain: float = 0.15
    defect_speed_threshold: float = 40.0
    defect_speed_gain: float = 0.12
    fill_stroke: float = Field(60.0, gt=0, description="mm; fill time = stroke / inject_speed")
    peak_pressure_ratio: float = 0.9
    viscous_peak: float = Field(80.0, description="bar at nominal viscosity and speed")
    hold_decay_per_s: float = Field(0.02, ge=0, lt=0.1)
    cool_tau: float = Field(4.0, gt=0, description="s")
    dwell_time: float = Field(12.0, gt=0, description="s from ejection to the next injection; the measurement window")
    temp_rise_fraction: float = Field(0.6, ge=0, le=1)
    mold_temp_tau: float = Field(8.0, gt=0)
    trace_pressure_sigma: float = Field(1.0, ge=0, description="bar")
    trace_temperature_sigma: float = Field(0.2, ge=0, description="°C")
    mass_jitter: float = Field(0.002, ge=0, description="g")
    length_jitter: float = Field(0.010, ge=0, description="mm")
    post_shrink: float = Field(0.004, ge=0, lt=1)
    post_tau: float = Field(5400.0, gt=0, description="s")


def cycle_seed(root_seed: int, cycle_index: int) -> int:
    """Per-cycle seed derived from the run seed; independent of how many cycles run."""
    return int(np.random.SeedSequence([int(root_seed), int(cycle_index)]).generate_state(1)[0])


def pressure_curve(
    t: np.ndarray,
    *,
    peak: float,
    hold_level: float,
    t_fill: float,
    hold_time: float,
    cool_time: float,
    hold_decay: float,
    cool_tau: float,
) -> np.ndarray:
    """Noise-free mold pressure: linear fill ramp, decaying hold plateau, exponential cooling, zero after ejection."""
    t_hold_end = t_fill + hold_time
    t_eject = t_hold_end + cool_time
    hold_end_level = hold_level * (1.0 - hold_decay * hold_time)
    with np.errstate(over="ignore"):
        return np.select(
            [t < t_fill, t < t_hold_end, t < t_eject],
            [
                peak * t / t_fill,
                hold_level * (1.0 - hold_decay * (t - t_fill)),
                hold_end_level * np.exp(-(t - t_hold_end) / cool_tau),
            ],
            default=0.0,
        )


def temperature_curve(
    t: np.ndarray, *, melt_temp: float, mold_temp: float, t_fill: float, rise_fraction: float, tau: float
) -> np.ndarray:
    """Noise-free mold-surface temperature: rise during fill, exponential relaxation afterwards."""
    delta = rise_fraction * (melt_temp - mold_temp)
    return np.where(
        t < t_fill,
        mold_temp + delta * t / t_fill,
        mold_temp + delta * np.exp(-(t - t_fill) / tau),
    )


def _check_finite(**values: float) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise NumericalFaultError(f"non-finite intermediate {name}={value}")


ControllerHook = Callable[[list[CycleRecord]], "ProcessParams | Mapping[str, float] | None"]
MeasureHook = Callable[[CycleRecord], CycleRecord]


class Plant:
    """Synthetic plant. Instances hold no mutable state; run_cycle is a pure function of its inputs."""

    def __init__(self, coefficients: PlantCoefficients | None = None, *, noise: bool = True):
        self.coefficients = coefficients or PlantCoefficients()
        self.noise = noise

    # --- phase chain ---

    def viscosity(self, melt_realized: float, state: DisturbanceState) -> float:
        c = self.coefficients
        try:
            return math.exp(-(melt_realized - NOMINAL_MELT_TEMP) / c.viscosity_temp_scale) * state.viscosity_factor
        except OverflowError:
            raise NumericalFaultError(f"viscosity overflows at realized melt temperature {melt_realized}") from None

    def effective_hold_pressure(self, params: ProcessParams, state: DisturbanceState) -> float:
        c = self.coefficients
        return params.hold_pressure - c.viscosity_pressure_loss * (state.viscosity_factor - 1.0) - state.checkring_leak

    def fill_time(self, params: ProcessParams) -> float:
        return self.coefficients.fill_stroke / params.inject_speed

    def ejection_time(self, params: ProcessParams) -> float:
        return self.fill_time(params) + params.hold_time + params.cool_time

    def cycle_time(self, params: ProcessParams) -> float:
        return self.ejection_time(params) + self.coefficients.dwell_time

    def idle_window(self, params: ProcessParams | None = None) -> tuple[float, float]:
        """(ejection, cycle end) of one cycle; the nominal cycle gives (18 s, 30 s)."""
        params = params or ProcessParams()
        return self.ejection_time(params), self.cycle_time(params)

    def quality(self, params: ProcessParams, state: DisturbanceState | None = None) -> PartQuality:
        """Reference quality equations (no jitter)."""
        c = self.coefficients
        state = state or DisturbanceState()
        melt = params.melt_temp + state.melt_temp_offset
        d_t = melt - NOMINAL_MELT_TEMP
        h = (self.effective_hold_pressure(params, state) - NOMINAL_HOLD_PRESSURE) / 200.0
        v = (params.inject_speed - NOMINAL_INJECT_SPEED) / 50.0
        _check_finite(realized_melt_temp=melt, pressure_term=h)
        mass = c.nominal_mass * (
            1.0
            + c.mass_pressure_gain * math.tanh(h)
            + c.mass_temp_coeff * d_t
            + c.mass_interaction * h * v
            - c.mass_temp_curvature * (d_t / 50.0) ** 2
        )
        dims: dict[str, float] = {}
        for name in DIMENSION_FIELDS:
            terms = c.shrinkage[name]
            s = terms.base + terms.pressure * math.tanh(h) + terms.temperature * d_t / 50.0 + terms.speed * v
            dims[name] = getattr(c, f"nominal_{name}") * (1.0 - s)
        speed_deficit = max(0.0, c.defect_speed_threshold - params.inject_speed)
        z = c.defect_offset + c.defect_temp_gain * abs(d_t) + c.defect_speed_gain * speed_deficit
        defect = 1.0 / (1.0 + math.exp(-z)) if z > -700 else 0.0
        _check_finite(mass=mass, defect_score=defect, **dims)
        return PartQuality(mass=mass, defect_score=defect, **dims)

    def run_cycle(
        self,
        params: ProcessParams,
        disturbance_state: DisturbanceState | None = None,
        rng_seed: int = 0,
        *,
        cycle_index: int = 0,
    ) -> CycleRecord:
        """Run one cycle; measured_quality is left empty for metrology."""
        if not isinstance(params, ProcessParams):
            params = ProcessParams(**params)
        c = self.coefficients
        state = disturbance_state or DisturbanceState()

        # plasticizing -> fill
        melt = params.melt_temp + state.melt_temp_offset
        eta = self.viscosity(melt, state)
        t_fill = self.fill_time(params)
        peak = c.peak_pressure_ratio * params.hold_pressure + c.viscous_peak * eta * (
            params.inject_speed / NOMINAL_INJECT_SPEED
        )
        # hold -> cool
        hold_level = c.peak_pressure_ratio * self.effective_hold_pressure(params, state)
        cycle_time = self.cycle_time(params)
        _check_finite(viscosity=eta, peak=peak, hold_level=hold_level, cycle_time=cycle_time)

        quality = self.quality(params, state)
        rng = np.random.default_rng(rng_seed)
        if self.noise:
            jitter_mass, jitter_length = rng.normal(0.0, 1.0, size=2)
            quality = quality.with_values(
                mass=quality.mass + c.mass_jitter * jitter_mass,
                length=quality.length + c.length_jitter * jitter_length,
            )

        n = math.ceil(round(cycle_time * SAMPLE_RATE, 6))
        t = np.arange(n, dtype=float) / SAMPLE_RATE
        pressure = pressure_curve(
            t,
            peak=peak,
            hold_level=hold_level,
            t_fill=t_fill,
            hold_time=params.hold_time,
            cool_time=params.cool_time,
            hold_decay=c.hold_decay_per_s,
            cool_tau=c.cool_tau,
        )
        temperature = temperature_curve(
            t,
            melt_temp=melt,
            mold_temp=params.mold_temp,
            t_fill=t_fill,
            rise_fraction=c.temp_rise_fraction,
            tau=c.mold_temp_tau,
        )
        if self.noise:
            pressure = pressure + rng.normal(0.0, c.trace_pressure_sigma, size=n)
            temperature = temperature + rng.normal(0.0, c.trace_temperature_sigma, size=n)
        if not (np.all(np.isfinite(pressure)) and np.all(np.isfinite(temperature))):
            raise NumericalFaultError(f"non-finite trace sample in cycle {cycle_index}")

        t_hold_end = t_fill + params.hold_time
        t_eject = t_hold_end + params.cool_time
        marks = (0, round(t_fill * SAMPLE_RATE), round(t_hold_end * SAMPLE_RATE), round(t_eject * SAMPLE_RATE))
        trace = CycleTrace(mold_pressure=pressure, mold_temperature=temperature, phase_marks=marks)
        events = {
            "injection_start": 0.0,
            "holding_start": t_fill,
            "cooling_start": t_hold_end,
            "ejection": t_eject,
            "cycle_end": cycle_time,
        }
        return CycleRecord(
            cycle_index=cycle_index,
            params=params,
            disturbance_state=state,
            trace=trace,
            true_quality=quality,
            cycle_time=cycle_time,
            events=events,
        )

    def run_sequence(
        self,
        initial_params: ProcessParams,
        n_cycles: int,
        disturbance: DisturbanceProfile | None = None,
        controller_hook: ControllerHook | None = None,
        rng_seed: int = 0,
        *,
        measure: MeasureHook | None = None,
    ) -> list[CycleRecord]:
        """
        Run n_cycles consecutive cycles. When given, measure is applied to each record and
        controller_hook then sees the full history and may return params for the next cycle.
        """
        if n_cycles < 1:
            raise RangeError(f"n_cycles must be >= 1, got {n_cycles}")
        disturbance = disturbance or DisturbanceProfile.none()
        params = initial_params
        history: list[CycleRecord] = []
        for i in range(n_cycles):
            record = self.run_cycle(params, disturbance.resolve(i), cycle_seed(rng_seed, i), cycle_index=i)
            if measure is not None:
                record = measure(record)
            history.append(record)
            if controller_hook is None:
                continue
            proposed = controller_hook(history)
            if proposed is None:
                continue
            if not isinstance(proposed, ProcessParams):
                try:
                    proposed = params.with_values(**dict(proposed))
                except RangeError as e:
                    raise RangeError(f"controller returned invalid params: {e}", cycle_index=i) from e
            params = proposed
        return history


def age_part(quality: PartQuality, elapsed: float, coefficients: PlantCoefficients | None = None) -> PartQuality:
    """Post-molding shrinkage relaxation: dimensions shrink toward nominal * (1 - post_shrink); mass unchanged."""
    if not elapsed >= 0:
        raise RangeError(f"elapsed must be >= 0, got {elapsed}")
    c = coefficients or PlantCoefficients()
    factor = 1.0 - c.post_shrink * (1.0 - math.exp(-elapsed / c.post_tau))
    return quality.with_values(**{name: getattr(quality, name) * factor for name in DIMENSION_FIELDS})


def nominal_quality(plant: Plant | None = None) -> PartQuality:
    """Noise-free quality at the nominal operating point."""
    return (plant or Plant(noise=False)).quality(ProcessParams(), DisturbanceState())


def quality_from_dict(data: Mapping[str, Any]) -> PartQuality:
    return PartQuality(**{k: float(data[k]) for k in QUALITY_FIELDS})
