"""Reference plant: calibration anchors, phase chaining, determinism, disturbances and aging."""
from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from control import make_inverse_hook
from errors import NumericalFaultError, RangeError
from plant import (
    PLANT_MODEL_VERSION,
    DisturbanceProfile,
    DisturbanceState,
    Plant,
    PlantCoefficients,
    ProcessParams,
    age_part,
    clamp_to_ranges,
    nominal_quality,
    pressure_curve,
)


def test_nominal_point_maps_to_nominal_part(quiet_plant, nominal):
    record = quiet_plant.run_cycle(nominal)
    assert record.true_quality.mass == pytest.approx(5.0, abs=1e-12)
    assert record.true_quality.length == pytest.approx(98.5, abs=1e-12)
    assert record.cycle_time == pytest.approx(30.0)
    assert record.trace.n_samples == 3000
    assert record.measured_quality is None


def test_melt_step_of_20_degrees_loses_exactly_1_27_percent(quiet_plant, nominal):
    hot = quiet_plant.run_cycle(nominal, DisturbanceState(melt_temp_offset=20.0))
    assert hot.true_quality.mass == pytest.approx(5.0 * (1 - 0.0127), abs=1e-12)
    assert hot.realized_melt_temp == 250.0
    assert hot.params.melt_temp == 230.0


def test_hold_pressure_plus_40_bar_matches_reference_equation(quiet_plant):
    quality = quiet_plant.run_cycle(ProcessParams(hold_pressure=440.0)).true_quality
    assert quality.mass > 5.0
    assert quality.mass == pytest.approx(5.0 * (1 + 0.05 * math.tanh(0.2)), abs=1e-12)


def test_factorial_spans_at_least_1_4_percent_of_mass(quiet_plant):
    masses = [
        quiet_plant.quality(ProcessParams(hold_pressure=hp, melt_temp=mt, inject_speed=v)).mass
        for hp, mt, v in itertools.product((300.0, 400.0, 500.0), (220.0, 230.0, 240.0), (30.0, 50.0, 70.0))
    ]
    assert (max(masses) - min(masses)) / 5.0 >= 0.014


def test_mass_rises_with_hold_pressure_and_falls_with_melt_temp(quiet_plant):
    by_pressure = [quiet_plant.quality(ProcessParams(hold_pressure=p)).mass for p in np.linspace(200.0, 600.0, 41)]
    assert np.all(np.diff(by_pressure) > 0)
    by_melt = [quiet_plant.quality(ProcessParams(melt_temp=t)).mass for t in np.linspace(230.0, 260.0, 31)]
    assert np.all(np.diff(by_melt) < 0)


@pytest.mark.parametrize(
    "params, n_samples",
    [
        (ProcessParams(), 3000),
        (ProcessParams(inject_speed=40.0, hold_time=3.0, cool_time=10.0), 2650),
        (ProcessParams(inject_speed=70.0, hold_time=7.0, cool_time=20.0), 3986),
        (ProcessParams(inject_speed=120.0, hold_time=1.0, cool_time=5.0), 1850),
    ],
)
def test_trace_length_covers_the_whole_cycle(quiet_plant, params, n_samples):
    record = quiet_plant.run_cycle(params)
    assert record.trace.n_samples == n_samples == math.ceil(record.cycle_time * 100 - 1e-9)
    assert len(record.trace.mold_pressure) == len(record.trace.mold_temperature)


def test_out_of_range_params_are_rejected():
    with pytest.raises(RangeError):
        ProcessParams(hold_pressure=650.0)
    with pytest.raises(RangeError):
        ProcessParams(melt_temp=float("nan"))


def test_non_finite_intermediate_is_a_fault():
    coefficients = PlantCoefficients(viscosity_temp_scale=1e-300)
    with pytest.raises(NumericalFaultError):
        Plant(coefficients, noise=False).run_cycle(ProcessParams(melt_temp=200.0))


def test_clamp_reports_when_it_moves_a_value(nominal):
    params, clamped = clamp_to_ranges({"hold_pressure": 700.0}, nominal)
    assert clamped and params.hold_pressure == 600.0
    params, clamped = clamp_to_ranges({"hold_pressure": 420.0}, nominal)
    assert not clamped and params.hold_pressure == 420.0


def test_same_seed_same_record(nominal):
    plant = Plant()
    a = plant.run_cycle(nominal, rng_seed=42, cycle_index=3)
    b = plant.run_cycle(nominal, rng_seed=42, cycle_index=3)
    assert a.true_quality == b.true_quality
    assert np.array_equal(a.trace.mold_pressure, b.trace.mold_pressure)
    assert np.array_equal(a.trace.mold_temperature, b.trace.mold_temperature)
    c = plant.run_cycle(nominal, rng_seed=43, cycle_index=3)
    assert not np.array_equal(a.trace.mold_pressure, c.trace.mold_pressure)


def test_events_follow_the_phase_chain(quiet_plant, nominal):
    events = quiet_plant.run_cycle(nominal).events
    order = ["injection_start", "holding_start", "cooling_start", "ejection", "cycle_end"]
    assert [events[name] for name in order] == sorted(events[name] for name in order)
    assert events["holding_start"] == pytest.approx(1.2)
    assert events["ejection"] == pytest.approx(18.0)
    assert events["cycle_end"] - events["ejection"] == pytest.approx(12.0)


def test_zero_hold_time_starts_decay_at_the_fill_boundary():
    t = np.arange(0, 3000) / 100.0
    curve = pressure_curve(
        t, peak=440.0, hold_level=360.0, t_fill=1.2, hold_time=0.0, cool_time=15.0, hold_decay=0.02, cool_tau=4.0
    )
    i_fill = 120
    assert curve[i_fill] == pytest.approx(360.0)
    assert curve[i_fill + 100] == pytest.approx(360.0 * math.exp(-1.0 / 4.0))
    assert curve[-1] == 0.0


def test_checkring_leak_lowers_the_plateau_not_the_peak(quiet_plant, nominal):
    clean = quiet_plant.run_cycle(nominal)
    leaking = quiet_plant.run_cycle(nominal, DisturbanceState(checkring_leak=60.0))
    assert leaking.trace.peak_pressure == pytest.approx(clean.trace.peak_pressure)
    mid_hold = 300
    assert leaking.trace.mold_pressure[mid_hold] < clean.trace.mold_pressure[mid_hold] - 40
    assert leaking.true_quality.mass / 5.0 - 1 == pytest.approx(0.05 * math.tanh(-0.3), abs=1e-12)


def test_sequence_without_noise_is_constant(quiet_plant, nominal):
    records = quiet_plant.run_sequence(nominal, 5)
    assert len({r.true_quality for r in records}) == 1
    assert [r.cycle_index for r in records] == list(range(5))


def test_step_disturbance_drops_mass_from_onset(quiet_plant, nominal):
    profile = DisturbanceProfile(kind="step", target="melt_temp_offset", magnitude=20.0, onset_cycle=3)
    masses = [r.true_quality.mass for r in quiet_plant.run_sequence(nominal, 6, profile)]
    assert masses[:3] == pytest.approx([5.0] * 3, abs=1e-12)
    assert masses[3:] == pytest.approx([5.0 * (1 - 0.0127)] * 3, abs=1e-12)


def test_batch_change_alternates_from_onset():
    profile = DisturbanceProfile(kind="batch-change", target="checkring_leak", magnitude=60.0, onset_cycle=10, batch_length=5)
    values = [profile.value_at(i) for i in range(25)]
    assert values[:10] == [0.0] * 10
    assert values[10:15] == [60.0] * 5
    assert values[15:20] == [0.0] * 5
    assert values[20:25] == [60.0] * 5


def test_ramp_requires_slope():
    with pytest.raises(RangeError):
        DisturbanceProfile(kind="ramp", target="viscosity_factor")


def test_hook_returning_out_of_range_params_names_the_cycle(quiet_plant, nominal):
    def hook(history):
        return {"hold_pressure": 900.0} if len(history) == 2 else None

    with pytest.raises(RangeError, match="cycle 1"):
        quiet_plant.run_sequence(nominal, 4, controller_hook=hook)


@pytest.mark.slow
def test_inverse_hook_reduces_viscosity_ramp_error(quiet_plant, nominal, inverse_model, target):
    profile = DisturbanceProfile(kind="ramp", target="viscosity_factor", magnitude=0.0, slope=0.01)
    free = quiet_plant.run_sequence(nominal, 30, profile)
    hooked = quiet_plant.run_sequence(nominal, 30, profile, controller_hook=make_inverse_hook(inverse_model, target))
    assert abs(hooked[-1].true_quality.mass - target.mass) < abs(free[-1].true_quality.mass - target.mass)


def test_age_part_limits_and_one_hour():
    quality = nominal_quality()
    assert age_part(quality, 0.0) == quality
    aged = age_part(quality, 3600.0)
    assert aged.length == pytest.approx(98.5 * (1 - 0.004 * (1 - math.exp(-2.0 / 3.0))), rel=1e-12)
    assert age_part(quality, 1e9).length == pytest.approx(98.5 * (1 - 0.004), rel=1e-12)
    assert aged.mass == quality.mass
    with pytest.raises(RangeError):
        age_part(quality, -1.0)


def test_model_version_is_declared():
    assert PLANT_MODEL_VERSION == "1.1"
