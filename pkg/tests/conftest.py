import json
from pathlib import Path
from typing import Any, Dict

import numpy as np
import pytest

from follicle_sim.characteristics import Controls, MaturityTrajectory
from follicle_sim.config import SolverSettings
from follicle_sim.initial_data import BumpDensity, InitialData
from follicle_sim.model import ModelParams

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def default_param_values() -> Dict[str, Any]:
    data = json.loads((CONFIG_DIR / "default_params.json").read_text(encoding="utf-8"))
    return {k: v for k, v in data.items() if not k.startswith("$")}


# Fixtures
@pytest.fixture
def param_values() -> Dict[str, Any]:
    return default_param_values()


@pytest.fixture
def params() -> ModelParams:
    """Shipped defaults on a short horizon."""
    return ModelParams.from_mapping(default_param_values()).with_changes(T=0.05)


@pytest.fixture
def single_params() -> ModelParams:
    """One follicle, one cycle."""
    values = default_param_values()
    values.update(n=1, N=1, tau_g=[1.0], tau_h=[1.0], T=0.05)
    return ModelParams.from_mapping(values)


@pytest.fixture
def small_settings() -> SolverSettings:
    return SolverSettings(quad_order=5, quad_max_level=2, rk4_step=2.5e-3, threads=1, contraction_pairs=1)


@pytest.fixture
def bump_data(params: ModelParams) -> InitialData:
    """Smooth data in every phase of the first cycle and in late proliferation of the second."""
    components = {}
    for f in range(params.n):
        components[(f, 1, 1)] = BumpDensity(1.0, (0.5, 0.5), (0.3, 0.3))
        components[(f, 2, 1)] = BumpDensity(0.8, (0.6, 0.5), (0.3, 0.3))
        components[(f, 3, 1)] = BumpDensity(0.5, (0.5, 0.5), (0.3, 0.3))
        components[(f, 2, 2)] = BumpDensity(0.6, (0.5, 0.5), (0.35, 0.3))
    return InitialData(params, components)


@pytest.fixture
def constant_controls(params: ModelParams) -> Controls:
    """Controls frozen at a constant maturity level over [0, T]."""
    times = np.linspace(0.0, params.T, 6)
    return Controls(params, MaturityTrajectory.constant(times, [0.5] * params.n), step=2.5e-3)
