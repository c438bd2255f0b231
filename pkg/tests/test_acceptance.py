"""End-to-end runs of the shipped scenarios against their acceptance thresholds."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from config import load_config
from control import Tolerances, run_inverse_loop
from metrology import default_plan
from plant import Plant, ProcessParams
from runtime import best_achievable_rms, run_scenario, self_test, verify_report

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

pytestmark = pytest.mark.slow


def _run(name: str, out: Path, **overrides):
    config = load_config(SCENARIOS / f"{name}.yaml", overrides)
    report = run_scenario(config, out)
    checks = self_test(report)
    assert all(ok for _, ok in verify_report(out / "report.json"))
    return report, checks


@pytest.mark.parametrize(
    "name", ["screen", "train_forward", "train_inverse", "train_narx", "train_narx_deep", "train_je", "tune", "regulate"]
)
def test_shipped_scenario_passes_its_self_test(name, tmp_path):
    report, checks = _run(name, tmp_path)
    assert checks
    assert all(ok for _, ok in checks), [c for c, ok in checks if not ok]


def test_forward_model_correlates_on_held_out_cycles(tmp_path):
    report, _ = _run("train_forward", tmp_path)
    correlation = report.results["forward"]["correlation"]
    assert correlation["mass"] >= 0.9
    assert correlation["length"] >= 0.9


def test_closed_loop_scenario(tmp_path):
    report, checks = _run("closed_loop", tmp_path)
    loop = report.results["closed_loop"]
    assert loop["oracle_best_rms"] <= 0.05
    assert loop["iterations"] <= 3
    assert all(ok for _, ok in checks), [c for c, ok in checks if not ok]


def test_closed_loop_converges_across_plant_seeds(inverse_model, target):
    plant = Plant()
    tolerances = Tolerances()
    ranges = {"hold_pressure": (300.0, 500.0), "melt_temp": (215.0, 245.0)}
    oracle, _ = best_achievable_rms(Plant(noise=False), target, ranges, tolerances)
    assert oracle <= 0.05
    start = ProcessParams(hold_pressure=360.0, melt_temp=240.0)
    converged = 0
    for seed in range(20):
        log = run_inverse_loop(
            plant, inverse_model, target, start, 3, 0.7, plan=default_plan(), plant_seed=100 + seed, measure_seed=200 + seed
        )
        converged += log.final.rms <= 0.07
    assert converged >= 18


@pytest.mark.parametrize("seed", [61, 62, 63, 64, 65])
def test_network_classifier_halves_spc_false_alarms(seed, tmp_path):
    report, checks = _run("spc_compare", tmp_path, seed=seed)
    summary = report.results["spc_compare"]
    assert summary["n_nonconforming"] > 0
    assert summary["network"]["matched_fp_rate"] <= 0.5 * summary["spc"]["matched_fp_rate"]
    assert all(ok for _, ok in checks)


def test_recurrent_models_predict_within_ten_percent(tmp_path):
    narx, _ = _run("train_narx", tmp_path / "narx")
    je, _ = _run("train_je", tmp_path / "je")
    assert narx.results["narx"]["one_step_nrmse_mass"] < 0.1
    assert np.isfinite(narx.results["narx"]["free_run_nrmse_mass"])
    assert narx.results["narx"]["one_step_nrmse_mass"] < narx.results["narx"]["free_run_nrmse_mass"]
    assert je.results["jordan_elman"]["one_step_nrmse"] < 0.1
