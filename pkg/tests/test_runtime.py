"""Scenario runner: seed streams, compute budget, report tracing and end-to-end pipelines at small scale."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from artifacts import read_csv, read_json, write_csv, write_json
from config import parse_config
from control import Tolerances
from errors import ScenarioError
from ledger import ledger_path, list_runs, verify_artifacts
from plant import Plant, ProcessParams, nominal_quality
from runtime import (
    CycleTiming,
    RunReport,
    SeedStreams,
    best_achievable_rms,
    check_budget,
    nrmse,
    profile_sequences,
    recompute_rms,
    run_scenario,
    self_test,
    start_params,
    verify_report,
)

SMALL_TRAIN = {"epochs": 40, "patience": 10}


def _run(tmp_path: Path, name: str, raw: dict):
    out = tmp_path / name
    return run_scenario(parse_config(raw), out), out


def test_seed_streams_are_named_and_indexed():
    streams = SeedStreams(7)
    assert streams.seed("plant", 0) == SeedStreams(7).seed("plant", 0)
    values = {streams.seed("plant", 0), streams.seed("plant", 1), streams.seed("metrology", 0), SeedStreams(8).seed("plant", 0)}
    assert len(values) == 4
    assert all(0 <= v < 2**64 for v in values)


@pytest.mark.parametrize(
    "measure, inference, passed",
    [(8.0, 0.005, True), (11.999, 0.002, False), (12.0, 0.0, True)],
)
def test_budget_boundaries(measure, inference, passed):
    [result] = check_budget([CycleTiming(0, measure, inference, 0.0)], 12.0)
    assert result.passed is passed
    assert result.total == pytest.approx(measure + inference)


def test_nrmse():
    target = np.array([1.0, 2.0, 3.0, 4.0])
    assert nrmse(target, target) == 0.0
    assert nrmse(target, target + np.std(target)) == pytest.approx(1.0)
    assert math.isinf(nrmse(np.ones(4), np.zeros(4)))


def test_profile_sequences_use_non_overlapping_windows():
    profile = np.arange(150, dtype=float)
    seqs, targets, where = profile_sequences([profile], 10)
    assert seqs.shape == (14, 10, 1)
    assert targets[:, 0].tolist() == [float(t) for t in range(10, 150, 10)]
    assert where[0] == (0, 10)
    assert seqs[1, :, 0].tolist() == list(range(10, 20))


def test_start_params_are_clamped():
    assert start_params({"hold_pressure": -40.0, "melt_temp": 10.0}) == ProcessParams(hold_pressure=360.0, melt_temp=240.0)
    assert start_params({"hold_pressure": 500.0}).hold_pressure == 600.0


def test_grid_oracle_finds_the_nominal_point():
    plant = Plant(noise=False)
    best, params = best_achievable_rms(
        plant, nominal_quality(plant), {"hold_pressure": (300.0, 500.0), "melt_temp": (215.0, 245.0)}, Tolerances()
    )
    assert best < 1e-9
    assert params.hold_pressure == pytest.approx(400.0)
    assert params.melt_temp == pytest.approx(230.0)


def test_traced_values_are_recomputed_from_csv(tmp_path):
    path = write_csv(tmp_path / "values.csv", ["x", "y", "flag"], [[1.5, 1.0, True], [2.5, 2.0, False], [3.5, 3.5, True]])
    report = RunReport(kind="screen", seed=1, config={})
    report.trace("x_mean", path, "x", "mean", 2.5)
    report.trace("x_tail", path, "x", "mean", 3.0, rows=(1, 3))
    report.trace("flags", path, "flag", "count_true", 2)
    report.trace("xs", path, "x", "list", [1.5, 2.5, 3.5])
    report.trace("fit", path, "x|y", "nrmse", nrmse(np.array([1.5, 2.5, 3.5]), np.array([1.0, 2.0, 3.5])))
    write_json(tmp_path / "report.json", report.as_dict())
    assert verify_report(tmp_path / "report.json") == [("x_mean", True), ("x_tail", True), ("flags", True), ("xs", True), ("fit", True)]

    write_csv(path, ["x", "y", "flag"], [[1.5, 1.0, True], [2.5, 2.0, True], [3.6, 3.5, True]])
    assert [ok for _, ok in verify_report(tmp_path / "report.json")] == [False, False, False, False, False]


def test_screen_scenario_flags_the_active_factors(tmp_path):
    report, out = _run(tmp_path, "screen", {"kind": "screen", "seed": 11})
    assert set(report.results["screen"]["significant"]) == {"hold_pressure", "melt_temp", "inject_speed"}
    assert report.results["screen"]["n_runs"] == 24
    assert all(ok for _, ok in verify_report(out / "report.json"))
    assert self_test(report) == [("screen flags exactly the active factors", True)]
    saved = read_json(out / "report.json")
    assert saved["schema_version"] == "1"
    assert saved["config"]["design"]["alpha"] == 0.001


def test_same_seed_gives_byte_identical_artifacts(tmp_path):
    raw = {"kind": "train-forward", "seed": 5, "dataset": {"n_cycles": 30}, "network": {"hidden": [3], "train": SMALL_TRAIN}}
    first, a = _run(tmp_path, "a", raw)
    _, b = _run(tmp_path, "b", raw)
    assert first.artifacts == ["cycles.csv", "heldout.csv", "network.json"]
    for name in first.artifacts:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    _, c = _run(tmp_path, "c", {**raw, "seed": 6})
    assert (a / "cycles.csv").read_bytes() != (c / "cycles.csv").read_bytes()


def test_forward_report_matches_its_heldout_csv(tmp_path):
    raw = {"kind": "train-forward", "seed": 2, "dataset": {"n_cycles": 54}, "network": {"hidden": [4], "train": SMALL_TRAIN}}
    report, out = _run(tmp_path, "forward", raw)
    checks = dict(verify_report(out / "report.json"))
    assert set(checks) == {"correlation_mass", "correlation_length"}
    assert all(checks.values())
    assert list(read_csv(out / "heldout.csv")[0]) == [
        "cycle_index", "measured_mass", "measured_length", "predicted_mass", "predicted_length",
    ]
    assert len(read_csv(out / "cycles.csv")) == 54


def test_narx_scenario_trains_on_a_drifting_sequence(tmp_path):
    raw = {
        "kind": "train-forward",
        "seed": 4,
        "dataset": {"n_cycles": 40, "factors": ["hold_pressure", "melt_temp"], "levels": 2},
        "disturbance": {"kind": "ramp", "target": "viscosity_factor", "slope": 0.004},
        "network": {"recurrence": "narx", "hidden": [6, 6], "train": SMALL_TRAIN},
    }
    report, out = _run(tmp_path, "narx", raw)
    assert report.results["narx"]["topology"] == "4-6-6-2"
    same_setting = [float(r["measured_mass"]) for r in read_csv(out / "cycles.csv")[::4]]
    assert same_setting[-1] < same_setting[0] - 0.01
    assert len(read_csv(out / "narx.csv")) == 39
    assert all(ok for _, ok in verify_report(out / "report.json"))


def test_closed_loop_records_timing_in_json_only(tmp_path):
    raw = {
        "kind": "closed-loop",
        "seed": 7,
        "loop": {"training_cycles": 40},
        "network": {"hidden": [4], "train": {"epochs": 200, "patience": 50}},
    }
    report, out = _run(tmp_path, "loop", raw)
    loop = report.results["closed_loop"]
    assert loop["start_params"] == {"hold_pressure": 360.0, "melt_temp": 240.0}
    assert loop["oracle_best_rms"] <= 0.05
    assert len(report.timing) == len(loop["rms_trajectory"])
    assert all(b["passed"] for b in report.budget)
    assert all(b["window"] == 12.0 for b in report.budget)
    rows = read_csv(out / "control_log.csv")
    assert not any("inference" in column for column in rows[0])
    assert recompute_rms(rows, Tolerances().controlled) == pytest.approx(loop["rms_trajectory"], rel=1e-12)
    assert all(ok for _, ok in verify_report(out / "report.json"))


def test_regulate_scenario_rejects_the_melt_step(tmp_path):
    raw = {
        "kind": "regulate",
        "seed": 3,
        "noise": False,
        "n_cycles": 60,
        "disturbance": {"kind": "step", "target": "melt_temp_offset", "magnitude": 20.0, "onset_cycle": 5},
    }
    report, out = _run(tmp_path, "regulate", raw)
    regulation = report.results["regulation"]
    assert regulation["open_deviation_pct"] == pytest.approx(-1.27, abs=1e-6)
    assert regulation["rejection_ratio"] >= 10
    assert regulation["law"] == "proportional"
    assert all(ok for _, ok in verify_report(out / "report.json"))
    assert len(read_csv(out / "regulation.csv")) == 60


def test_module_errors_carry_scenario_context_and_are_recorded(tmp_path):
    out = tmp_path / "failed"
    config = parse_config({"kind": "regulate", "seed": 1, "n_cycles": 5})
    with pytest.raises(ScenarioError) as info:
        run_scenario(config, out)
    assert info.value.kind == "regulate"
    assert "steady_state_cycles" in str(info.value)
    [run] = list_runs(ledger_path(out))
    assert run["status"] == "failed"
    assert run["report_path"] is None


def test_successful_run_is_in_the_ledger_with_checksums(tmp_path):
    report, out = _run(tmp_path, "screen", {"kind": "screen", "seed": 4})
    [run] = list_runs(ledger_path(out))
    assert run["status"] == "ok"
    assert run["seed"] == "4"
    checks = dict(verify_artifacts(ledger_path(out), run["id"]))
    assert set(checks) == {*report.artifacts, "report.json"}
    assert all(checks.values())


def test_self_test_thresholds_for_regulation_and_spc():
    report = RunReport(kind="regulate", seed=1, config={})
    report.results["regulation"] = {"rejection_ratio": 9.5}
    assert self_test(report) == [("rejection ratio >= 10.0", False)]
    report.results = {"spc_compare": {"network": {"matched_fp_rate": 0.01}, "spc": {"matched_fp_rate": 0.03}}}
    assert all(ok for _, ok in self_test(report))
