from typing import Any, Dict, List, Optional, TypedDict

import numpy as np

from .characteristics import FrozenControls, MaturityTrajectory
from .config import RunConfig, SolverSettings, TestHooks
from .initial_data import InitialData
from .model import ModelParams
from .quadrature import QuadraturePlan


class WindowRecord(TypedDict):
    t_lo: float
    t_hi: float
    delta: float
    report: Dict[str, Any]
    contraction: Dict[str, Any]
    reanchored: bool


class MarchState(TypedDict):
    """
    State passed between the window-marching nodes.
    The committed trajectory grows by one window per commit.
    """
    params: ModelParams
    settings: SolverSettings
    hooks: TestHooks
    frozen: Optional[FrozenControls]
    constants: Any
    horizon: float
    anchors: List[InitialData]
    trajectory: Optional[MaturityTrajectory]
    t_current: float
    delta: float  # current window length; halved on a failed contraction check
    step: float
    plan: Optional[QuadraturePlan]
    composed: int  # windows traced back to the latest anchor
    halvings: int
    windows: List[WindowRecord]
    reanchor_times: List[float]
    rng: np.random.Generator
    done: bool
    # per-window scratch
    problem: Any
    candidate: Optional[MaturityTrajectory]
    report: Any
    contraction: Any
    accepted: bool


class PropertyResult(TypedDict):
    name: str
    passed: bool
    details: Dict[str, Any]


class VerifyState(TypedDict):
    run: RunConfig
    initial: InitialData
    frozen: Optional[FrozenControls]
    march: Any  # MarchResult of the configured problem
    results: List[PropertyResult]
    passed: bool
    report: Dict[str, Any]
