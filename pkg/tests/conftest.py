"""Shared fixtures. The repository root holds flat modules, so it goes on sys.path."""
from __future__ import annotations

import os
import sys

_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, _ROOT)

import numpy as np
import pytest

from control import ProcessModel, Tolerances, fit_inverse
from metrology import default_plan, measure_cycle
from nnet import TrainConfig
from plant import Plant, ProcessParams, cycle_seed, nominal_quality


@pytest.fixture
def nominal() -> ProcessParams:
    return ProcessParams()


@pytest.fixture
def quiet_plant() -> Plant:
    """Noise-free plant."""
    return Plant(noise=False)


@pytest.fixture
def target():
    return nominal_quality()


@pytest.fixture(scope="session")
def inverse_model() -> ProcessModel:
    """Inverse model (controlled quality -> hold_pressure, melt_temp) trained on 200 random cycles."""
    plant = Plant()
    plan = default_plan()
    rng = np.random.default_rng(3)
    cycles = []
    for i in range(200):
        params = ProcessParams(hold_pressure=float(rng.uniform(300, 500)), melt_temp=float(rng.uniform(215, 245)))
        record = plant.run_cycle(params, rng_seed=cycle_seed(3, i), cycle_index=i)
        cycles.append(measure_cycle(record, plan, cycle_seed(4, i)))
    return fit_inverse(cycles, quality_fields=Tolerances().controlled, config=TrainConfig(epochs=3000, patience=200, seed=3))
