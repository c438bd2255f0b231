"""
Simulated in-cycle measurement station.

Instruments corrupt true values with Gaussian noise and quantize to their grid
(round half away from zero). Measurement tasks are packed into the idle window of
the cycle chronogram; a plan that does not fit is an error, not a warning.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Literal, Mapping, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from errors import InfeasibleScheduleError, RangeError
from plant import (
    DIMENSION_FIELDS,
    CycleRecord,
    CycleTrace,
    PartQuality,
    Plant,
    PlantCoefficients,
    ThermalSnapshot,
    age_part,
)

logger = logging.getLogger("metrology")

SCHEDULE_TOLERANCE = 1e-9  # s
ASPECT_NOISE_SIGMA = 0.02
AMBIENT_TEMP = 25.0  # °C
PART_COOLING_TAU = 60.0  # s, part surface in air after ejection
REMEASURE_DELAYS = (3600.0, 86400.0)  # one hour, one day


class Instrument(BaseModel):
    """A measurement device. kind selects which characteristic it measures."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = Field(min_length=1)
    kind: Literal["mass", "dimensions", "thermal"]
    resolution: float = Field(gt=0, description="grid step in measured units")
    noise_sigma: float = Field(ge=0, description="additive Gaussian noise, measured units")
    duration: float = Field(gt=0, description="s")

    @property
    def variance(self) -> float:
        """Gage variance: noise plus uniform quantization error."""
        return self.noise_sigma**2 + self.resolution**2 / 12.0


BALANCE = Instrument(name="balance", kind="mass", resolution=0.001, noise_sigma=0.0005, duration=2.0)
LASER_SCANNER = Instrument(
    name="laser_scanner", kind="dimensions", resolution=0.050, noise_sigma=0.015, duration=6.0
)
THERMAL_CAMERA = Instrument(name="thermal_camera", kind="thermal", resolution=0.1, noise_sigma=0.2, duration=3.0)


def default_catalog() -> dict[str, Instrument]:
    return {i.name: i for i in (BALANCE, LASER_SCANNER, THERMAL_CAMERA)}


def quantize(value: float, step: float) -> float:
    """Round half away from zero onto the grid k * step."""
    if step <= 0:
        raise RangeError(f"quantization step must be > 0, got {step}")
    k = math.floor(abs(value) / step + 0.5)
    return round(math.copysign(k * step, value), 10)


def weigh(true_mass: float, seed: int = 0, *, instrument: Instrument = BALANCE, noise: bool = True) -> float:
    """Balance reading in g."""
    if not (math.isfinite(true_mass) and true_mass > 0):
        raise RangeError(f"mass must be > 0, got {true_mass}")
    value = true_mass
    if noise and instrument.noise_sigma > 0:
        value += np.random.default_rng(seed).normal(0.0, instrument.noise_sigma)
    return quantize(value, instrument.resolution)


def scan_dimensions(
    true_quality: PartQuality, seed: int = 0, *, instrument: Instrument = LASER_SCANNER, noise: bool = True
) -> PartQuality:
    """Laser scan: every dimension gets noise and is snapped to the scanner grid. Mass and defect pass through."""
    offsets = np.zeros(len(DIMENSION_FIELDS))
    if noise and instrument.noise_sigma > 0:
        offsets = np.random.default_rng(seed).normal(0.0, instrument.noise_sigma, size=len(DIMENSION_FIELDS))
    scanned = {
        name: quantize(getattr(true_quality, name) + float(off), instrument.resolution)
        for name, off in zip(DIMENSION_FIELDS, offsets)
    }
    return true_quality.with_values(**scanned)


def thermal_snapshot(
    record: CycleRecord,
    seed: int = 0,
    *,
    instrument: Instrument = THERMAL_CAMERA,
    noise: bool = True,
    delay: float = 0.0,
) -> ThermalSnapshot:
    """
    Surface temperature of the ejected part, `delay` seconds after ejection.
    The part cools exponentially toward ambient; the hottest spot keeps a fraction
    of the melt-to-mold difference.
    """
    if delay < 0:
        raise RangeError(f"delay must be >= 0, got {delay}")
    i_eject = record.trace.phase_marks[-1]
    t_eject = float(record.trace.mold_temperature[i_eject])
    decay = math.exp(-delay / PART_COOLING_TAU)
    mean = AMBIENT_TEMP + (t_eject - AMBIENT_TEMP) * decay
    hot_spot = 0.1 * (record.realized_melt_temp - record.params.mold_temp) * decay
    values = np.array([mean, mean + hot_spot])
    if noise and instrument.noise_sigma > 0:
        values = values + np.random.default_rng(seed).normal(0.0, instrument.noise_sigma, size=2)
    return ThermalSnapshot(
        mean_surface_temp=quantize(float(values[0]), instrument.resolution),
        max_surface_temp=quantize(float(max(values[1], values[0])), instrument.resolution),
    )


def drift_trace(trace: CycleTrace, drift_rate: float, seed: int = 0) -> CycleTrace:
    """
    Add a bounded random-walk offset to the pressure channel.
    Each sample moves by at most |drift_rate| / sample_rate, so |offset(t)| <= |drift_rate| * t.
    """
    if not math.isfinite(drift_rate) or abs(drift_rate) > 1.0:
        raise RangeError(f"|drift_rate| must be <= 1 bar/s, got {drift_rate}")
    if drift_rate == 0:
        return trace
    bound = abs(drift_rate) / trace.sample_rate
    steps = np.random.default_rng(seed).uniform(-bound, bound, size=trace.n_samples)
    offset = np.concatenate(([0.0], np.cumsum(steps[:-1])))
    return trace.with_pressure(trace.mold_pressure + offset)


def average_trace(
    trace: CycleTrace | np.ndarray, window: int, *, channel: str = "mold_pressure"
) -> np.ndarray:
    """Block means over consecutive windows; the trailing partial window is dropped."""
    if window < 1:
        raise RangeError(f"window must be >= 1, got {window}")
    values = np.asarray(getattr(trace, channel) if isinstance(trace, CycleTrace) else trace, dtype=float)
    n_points = len(values) // window
    if window == 1:
        return values.copy()
    return values[: n_points * window].reshape(n_points, window).mean(axis=1)


@dataclass(frozen=True)
class ChronogramPlan:
    """Ordered measurement tasks with their start offsets inside the idle window."""

    tasks: tuple[tuple[Instrument, float], ...]
    idle_window: tuple[float, float]

    def __post_init__(self) -> None:
        start, end = self.idle_window
        cursor = start
        for instrument, offset in self.tasks:
            if offset < cursor - SCHEDULE_TOLERANCE:
                raise RangeError(f"task {instrument.name} at {offset} s overlaps previous task or window start")
            cursor = offset + instrument.duration
        if cursor > end + SCHEDULE_TOLERANCE:
            raise InfeasibleScheduleError(cursor - end)

    @property
    def end(self) -> float:
        if not self.tasks:
            return self.idle_window[0]
        instrument, offset = self.tasks[-1]
        return offset + instrument.duration

    @property
    def total_duration(self) -> float:
        return sum(i.duration for i, _ in self.tasks)

    def instrument(self, kind: str) -> Instrument | None:
        return next((i for i, _ in self.tasks if i.kind == kind), None)

    def anchored(self, record: CycleRecord) -> "ChronogramPlan":
        """This plan if it fits the record's post-ejection window, else the same tasks re-packed from its ejection."""
        ejection = record.events["ejection"]
        start = self.tasks[0][1] if self.tasks else self.idle_window[0]
        if start >= ejection - SCHEDULE_TOLERANCE and self.end <= record.cycle_time + SCHEDULE_TOLERANCE:
            return self
        return schedule([i for i, _ in self.tasks], cycle_time=record.cycle_time, ejection_offset=ejection)


def schedule(plan_tasks: Sequence[Instrument], cycle_time: float, ejection_offset: float) -> ChronogramPlan:
    """Pack tasks back-to-back in declared order from ejection_offset; they must finish by cycle_time."""
    if not (cycle_time > ejection_offset >= 0):
        raise RangeError(f"need cycle_time > ejection_offset >= 0, got {cycle_time}, {ejection_offset}")
    total = sum(t.duration for t in plan_tasks)
    overflow = total - (cycle_time - ejection_offset)
    if overflow > SCHEDULE_TOLERANCE:
        names = ", ".join(t.name for t in plan_tasks)
        raise InfeasibleScheduleError(
            overflow,
            f"tasks [{names}] need {total:.3f} s but the idle window is {cycle_time - ejection_offset:.3f} s "
            f"(overflow {overflow:.3f} s)",
        )
    tasks: list[tuple[Instrument, float]] = []
    cursor = ejection_offset
    for task in plan_tasks:
        tasks.append((task, cursor))
        cursor += task.duration
    logger.debug("Scheduled %d tasks, %.3f s of %.3f s window", len(tasks), total, cycle_time - ejection_offset)
    return ChronogramPlan(tasks=tuple(tasks), idle_window=(ejection_offset, cycle_time))


def default_plan(
    catalog: Mapping[str, Instrument] | None = None, idle_window: tuple[float, float] | None = None
) -> ChronogramPlan:
    """Default catalog packed from the nominal cycle's ejection to its end."""
    catalog = catalog or default_catalog()
    start, end = idle_window or Plant(noise=False).idle_window()
    return schedule(list(catalog.values()), cycle_time=end, ejection_offset=start)


def measure_cycle(
    record: CycleRecord,
    plan: ChronogramPlan,
    seed: int = 0,
    *,
    noise: bool = True,
    aspect_sigma: float = ASPECT_NOISE_SIGMA,
) -> CycleRecord:
    """
    Run the plan on one part: fills measured_quality and thermal, stamps task start/end events.
    The plan must start at or after the part's ejection and end by the cycle end; use
    `plan.anchored(record)` for cycles whose timing differs from the plan's.
    """
    ejection = record.events["ejection"]
    if plan.tasks and plan.tasks[0][1] < ejection - SCHEDULE_TOLERANCE:
        early = ejection - plan.tasks[0][1]
        raise InfeasibleScheduleError(
            early,
            f"plan starts at {plan.tasks[0][1]:.3f} s, before cycle {record.cycle_index} "
            f"ejects its part at {ejection:.3f} s",
        )
    overflow = plan.end - record.cycle_time
    if overflow > SCHEDULE_TOLERANCE:
        raise InfeasibleScheduleError(
            overflow, f"plan ends at {plan.end:.3f} s, after cycle {record.cycle_index} ends at {record.cycle_time:.3f} s"
        )
    rng = np.random.default_rng(seed)
    measured = record.true_quality
    thermal = record.thermal
    events = dict(record.events)
    for instrument, start in plan.tasks:
        task_seed = int(rng.integers(0, 2**63))
        if instrument.kind == "mass":
            measured = measured.with_values(
                mass=weigh(record.true_quality.mass, task_seed, instrument=instrument, noise=noise)
            )
        elif instrument.kind == "dimensions":
            scanned = scan_dimensions(record.true_quality, task_seed, instrument=instrument, noise=noise)
            measured = measured.with_values(**{n: getattr(scanned, n) for n in DIMENSION_FIELDS})
        else:
            delay = max(start - ejection, 0.0)  # within SCHEDULE_TOLERANCE of ejection at worst
            thermal = thermal_snapshot(record, task_seed, instrument=instrument, noise=noise, delay=delay)
        events[f"measure.{instrument.name}.start"] = start
        events[f"measure.{instrument.name}.end"] = start + instrument.duration
    if noise and aspect_sigma > 0:
        score = record.true_quality.defect_score + float(rng.normal(0.0, aspect_sigma))
        measured = measured.with_values(defect_score=min(max(score, 0.0), 1.0))
    return replace(record, measured_quality=measured, thermal=thermal, events=events)


def remeasure_aged(
    quality: PartQuality,
    elapsed: float,
    seed: int = 0,
    *,
    instrument: Instrument = LASER_SCANNER,
    coefficients: PlantCoefficients | None = None,
    noise: bool = True,
) -> PartQuality:
    """Scan a part again after post-molding shrinkage has relaxed for `elapsed` seconds."""
    return scan_dimensions(age_part(quality, elapsed, coefficients), seed, instrument=instrument, noise=noise)
