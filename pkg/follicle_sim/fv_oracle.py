"""First-order upwind finite-volume discretization of the coupled system.

Independent of the characteristics path: cell averages on a uniform grid per
unit square, dimensional splitting (x sweep, y sweep, exact exponential
loss), controls lagged by one step. Every boundary flux is recorded in
physical mass units so the interface audits can be checked per step.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import model as mdl
from .characteristics import FrozenControls
from .config import TestHooks
from .errors import CFLViolation, NonfiniteState
from .initial_data import InitialData
from .model import ModelParams
from .quadrature import unit_rule

logger = logging.getLogger(__name__)

BAR, HAT, TILDE = 0, 1, 2
CFL = 0.9


@dataclass
class Grid:
    """Cell averages, shape (n, 3, N, nx, ny), at time ``t``."""

    params: ModelParams
    values: np.ndarray
    t: float = 0.0

    @property
    def resolution(self) -> int:
        return self.values.shape[-1]

    @property
    def h(self) -> float:
        return 1.0 / self.resolution

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.resolution) + 0.5) * self.h

    @classmethod
    def from_initial(cls, initial: InitialData, resolution: int) -> "Grid":
        p = initial.params
        nodes, weights = unit_rule(2, resolution)
        X, Y = np.meshgrid(nodes, nodes, indexing="ij")
        W = np.outer(weights, weights) * resolution**2
        values = np.zeros((p.n, 3, p.N, resolution, resolution))
        for (f, phase, k), density in initial.components.items():
            samples = density(X, Y) * W
            values[f, phase - 1, k - 1] = samples.reshape(resolution, 2, resolution, 2).sum(axis=(1, 3))
        return cls(p, values, initial.t_anchor)

    def component(self, f: int, phase: int, k: int) -> np.ndarray:
        return self.values[f, phase - 1, k - 1]

    def maturities(self) -> np.ndarray:
        """Midpoint-rule follicular maturities."""
        p = self.params
        y = self.centers
        h2 = self.h**2
        out = np.zeros(p.n)
        for phase in (1, 2, 3):
            weight = np.asarray(mdl.maturity_weight(y, phase, p))
            out += h2 * np.einsum("fkij,j->f", self.values[:, phase - 1], weight)
        return out

    def masses(self) -> np.ndarray:
        p = self.params
        h2 = self.h**2
        return sum(mdl.mass_weight(phase, p) * h2 * self.values[:, phase - 1].sum(axis=(1, 2, 3)) for phase in (1, 2, 3))

    def copy(self) -> "Grid":
        return Grid(self.params, self.values.copy(), self.t)

    def components(self) -> Dict[Tuple[int, int, int], np.ndarray]:
        """Cell averages keyed like ``InitialData`` components: (follicle, phase, cycle)."""
        p = self.params
        return {(f, phase, k): self.values[f, phase - 1, k - 1] for f in range(p.n) for phase in (1, 2, 3) for k in range(1, p.N + 1)}


@dataclass
class FluxLedger:
    """Boundary transfers of one step in physical mass units, arrays of shape (n, N)."""

    t: float
    dt: float
    mitosis_in: np.ndarray
    late_out: np.ndarray
    early_out: np.ndarray
    late_in: np.ndarray
    top_out: np.ndarray
    bottom_in: np.ndarray
    transfer_in: np.ndarray
    differentiation_out: np.ndarray
    lost: np.ndarray


def _controls(grid: Grid, frozen: Optional[FrozenControls]):
    p = grid.params
    if frozen is not None:
        u = np.array([np.interp(grid.t, frozen.times, frozen.u[f]) for f in range(p.n)])
        return u, float(np.interp(grid.t, frozen.times, frozen.U))
    M_f = grid.maturities()
    M = float(M_f.sum())
    U = float(mdl.global_control_U(M, grid.t, p))
    return np.array([float(mdl.local_control_u(M_f[f], M, grid.t, f, p)) for f in range(p.n)]), U


def max_speed(params: ModelParams, u: np.ndarray, resolution: int) -> float:
    faces = np.arange(resolution + 1) / resolution
    speeds = []
    for f in range(params.n):
        speeds += [
            float(mdl.velocity_gbar(u[f], f, params)),
            mdl.velocity_ghat(f, params),
            mdl.velocity_gtilde(f, params),
            float(np.max(np.abs(mdl.velocity_hbar(faces, u[f], f, params)))),
            float(np.max(np.abs(mdl.velocity_htilde(faces, u[f], f, params)))),
        ]
    return max(speeds)


def stable_dt(grid: Grid, frozen: Optional[FrozenControls] = None, cfl: float = CFL) -> float:
    u, _ = _controls(grid, frozen)
    return cfl * grid.h / max_speed(grid.params, u, grid.resolution)


def _top_inflow(top: np.ndarray, ratio: float, h: float) -> np.ndarray:
    """Averages of the Phase-1 top row over the stretched age cells of Phase 3."""
    nx = top.size
    edges = np.arange(nx + 1) * h
    cumulative = np.concatenate([[0.0], np.cumsum(top) * h])
    lo = np.minimum(ratio * edges[:-1], 1.0)
    hi = np.minimum(ratio * edges[1:], 1.0)
    return (np.interp(hi, edges, cumulative) - np.interp(lo, edges, cumulative)) / (ratio * h)


def step(grid: Grid, hooks: TestHooks = TestHooks(), frozen: Optional[FrozenControls] = None, dt: Optional[float] = None, cfl: float = CFL):
    """Advance the grid by one step; returns (new grid, flux ledger)."""
    p = grid.params
    h = grid.h
    u, U = _controls(grid, frozen)
    for f in range(p.n):
        mdl.check_sign_hypotheses(u[f], f, p, t=grid.t)
    limit = cfl * h / max_speed(p, u, grid.resolution)
    if dt is None:
        dt = limit
    elif dt > limit * (1 + 1e-12):
        raise CFLViolation("time step exceeds the CFL limit", dt=dt, limit=limit, t=grid.t)
    c = dt / h
    shape = (p.n, p.N)
    ledger = FluxLedger(grid.t, dt, *(np.zeros(shape) for _ in range(9)))
    mass = [mdl.mass_weight(phase, p) for phase in (1, 2, 3)]
    ratio = p.a2 / p.a1
    faces = np.arange(grid.resolution + 1) * h
    centers = grid.centers
    new = grid.values.copy()

    for f in range(p.n):
        gbar = float(mdl.velocity_gbar(u[f], f, p))
        ghat = mdl.velocity_ghat(f, p)
        gtilde = mdl.velocity_gtilde(f, p)
        tau_g = p.tau_g[f]
        S = grid.values[f]

        # x sweep: fluxes through the age faces, inflow from the coupled faces
        flux = np.zeros((3, p.N, grid.resolution + 1, grid.resolution))
        flux[BAR, :, 1:] = gbar * S[BAR]
        flux[HAT, :, 1:] = ghat * S[HAT]
        flux[TILDE, :, 1:] = gtilde * S[TILDE]
        flux[BAR, 1:, 0] = hooks.mitosis_factor * tau_g / p.a1 * S[HAT, :-1, -1]
        flux[HAT, :, 0] = ghat * p.a1 * gbar / tau_g * S[BAR, :, -1]
        flux[TILDE, 1:, 0] = gtilde * S[TILDE, :-1, -1]
        if hooks.closed_domain:
            flux[HAT, -1, -1] = 0.0
            flux[TILDE, -1, -1] = 0.0
        new[f] = S - c * (flux[:, :, 1:] - flux[:, :, :-1])

        to_mass = dt * h
        ledger.mitosis_in[f] = flux[BAR, :, 0].sum(axis=-1) * to_mass * mass[BAR]
        ledger.late_out[f] = flux[HAT, :, -1].sum(axis=-1) * to_mass * mass[HAT]
        ledger.early_out[f] = flux[BAR, :, -1].sum(axis=-1) * to_mass * mass[BAR]
        ledger.late_in[f] = flux[HAT, :, 0].sum(axis=-1) * to_mass * mass[HAT]
        ledger.transfer_in[f] = flux[TILDE, :, 0].sum(axis=-1) * to_mass * mass[TILDE]
        ledger.differentiation_out[f] = flux[TILDE, :, -1].sum(axis=-1) * to_mass * mass[TILDE]

        # y sweep on the x-swept state
        S = new[f].copy()
        v_bar = np.asarray(mdl.velocity_hbar(faces, u[f], f, p))
        v_tilde = np.asarray(mdl.velocity_htilde(faces, u[f], f, p))
        yflux_bar = np.zeros((p.N, grid.resolution, grid.resolution + 1))
        yflux_bar[:, :, 1:] = v_bar[1:] * S[BAR]
        yflux_tilde = np.zeros_like(yflux_bar)
        plus, minus = np.maximum(v_tilde, 0.0), np.minimum(v_tilde, 0.0)
        yflux_tilde[:, :, 1:-1] = plus[1:-1] * S[TILDE, :, :, :-1] + minus[1:-1] * S[TILDE, :, :, 1:]
        yflux_tilde[:, :, -1] = plus[-1] * S[TILDE, :, :, -1]
        for k in range(p.N):
            yflux_tilde[k, :, 0] = plus[0] * _top_inflow(S[BAR, k, :, -1], ratio, h)
        new[f, BAR] = S[BAR] - c * (yflux_bar[:, :, 1:] - yflux_bar[:, :, :-1])
        new[f, TILDE] = S[TILDE] - c * (yflux_tilde[:, :, 1:] - yflux_tilde[:, :, :-1])
        ledger.top_out[f] = yflux_bar[:, :, -1].sum(axis=-1) * to_mass * mass[BAR]
        ledger.bottom_in[f] = yflux_tilde[:, :, 0].sum(axis=-1) * to_mass * mass[TILDE]

        # exact exponential loss
        if not hooks.zero_loss:
            before = new[f].copy()
            new[f, BAR] *= np.exp(-np.asarray(mdl.loss_lbar(centers, U, p)) * dt)[None, None, :]
            new[f, TILDE] *= np.exp(-np.asarray(mdl.loss_ltilde(centers, U, p)) * dt)[None, None, :]
            for phase in (BAR, TILDE):
                ledger.lost[f] += (before[phase] - new[f, phase]).sum(axis=(-1, -2)) * h * h * mass[phase]

    if not np.all(np.isfinite(new)):
        raise NonfiniteState("non-finite cell average after a step", t=grid.t)
    return Grid(p, new, grid.t + dt), ledger


@dataclass
class FVRun:
    grid: Grid
    times: np.ndarray
    maturities: np.ndarray  # shape (n, len(times))
    controls: np.ndarray  # shape (n + 1, len(times)): u_1..u_n, U
    ledgers: List[FluxLedger] = field(default_factory=list)
    masses: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    snapshots: Dict[float, Grid] = field(default_factory=dict)


def run(
    T: float,
    initial: InitialData,
    params: ModelParams,
    resolution: int,
    hooks: TestHooks = TestHooks(),
    frozen: Optional[FrozenControls] = None,
    cfl: float = CFL,
    keep_ledgers: bool = False,
    max_steps: Optional[int] = None,
    snapshot_times: Sequence[float] = (),
) -> FVRun:
    """March the grid to time T, re-choosing the step from the CFL rule each time.

    Steps are shortened to land exactly on every requested snapshot time.
    """
    grid = Grid.from_initial(initial, resolution)
    end = grid.t + T
    times, maturities, controls, masses, ledgers = [grid.t], [grid.maturities()], [], [grid.masses()], []
    u, U = _controls(grid, frozen)
    controls.append(np.append(u, U))
    pending = sorted(float(t) for t in snapshot_times if grid.t <= t <= end)
    snapshots: Dict[float, Grid] = {}
    while pending and pending[0] <= grid.t + 1e-14:
        snapshots[pending.pop(0)] = grid.copy()
    steps = 0
    while grid.t < end - 1e-14 and (max_steps is None or steps < max_steps):
        target = pending[0] if pending else end
        dt = min(stable_dt(grid, frozen, cfl), target - grid.t)
        grid, ledger = step(grid, hooks, frozen, dt=dt, cfl=cfl)
        if pending and abs(grid.t - target) <= 1e-14 * max(1.0, target):
            grid.t = target
            while pending and pending[0] <= grid.t + 1e-14:
                snapshots[pending.pop(0)] = grid.copy()
        steps += 1
        times.append(grid.t)
        maturities.append(grid.maturities())
        masses.append(grid.masses())
        u, U = _controls(grid, frozen)
        controls.append(np.append(u, U))
        if keep_ledgers:
            ledgers.append(ledger)
    logger.info("finite-volume run at %d cells per side: %d steps to t=%.6g", resolution, steps, grid.t)
    return FVRun(grid, np.array(times), np.array(maturities).T, np.array(controls).T, ledgers, np.array(masses).T, snapshots)
