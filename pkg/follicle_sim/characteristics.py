"""Characteristic curves of the frozen-control problem.

A ``Controls`` object freezes a maturity trajectory (or an open-loop control
schedule) and exposes the phase velocities as functions of (s, y). All
integration is fixed-step classical RK4 on a step grid aligned with the
control knots, with face crossings localized by bisection. Points are
processed in numpy batches; the scalar operations are thin wrappers.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import model as mdl
from .config import TestHooks
from .errors import ChainOverflow, ConfigError, DegenerateVelocity, StepFailure, WindowExceeded
from .model import ModelParams, Phase

logger = logging.getLogger(__name__)

EVENT_TOL = 1e-12
TIE_TOL = 1e-10
COVERAGE_TOL = 1e-12
DEGENERATE_VELOCITY = 1e-14


class Face(IntEnum):
    ENDPOINT = 0  # reached the requested end time (the anchor time in a backtrace)
    BACK = 2  # x = 0
    FRONT = 3  # x = 1
    LEFT = 4  # y = 0
    RIGHT = 5  # y = 1


FACE_NAMES = {Face.ENDPOINT: "bottom", Face.BACK: "back", Face.FRONT: "front", Face.LEFT: "left", Face.RIGHT: "right"}


class RegionLabel(str, Enum):
    P1_OMEGA1 = "P1_omega1"
    P1_OMEGA2 = "P1_omega2"
    P1_OMEGA3 = "P1_omega3"
    P3_OMEGA1 = "P3_omega1"
    P3_OMEGA2 = "P3_omega2"
    P3_OMEGA3 = "P3_omega3"
    P3_OMEGA4 = "P3_omega4"
    P2_INTERIOR_LEFT = "P2_interior_left"
    P2_INTERIOR_RIGHT = "P2_interior_right"


FIRST_LEG_LABELS = {
    (1, Face.ENDPOINT): RegionLabel.P1_OMEGA1,
    (1, Face.BACK): RegionLabel.P1_OMEGA2,
    (1, Face.LEFT): RegionLabel.P1_OMEGA3,
    (2, Face.ENDPOINT): RegionLabel.P2_INTERIOR_RIGHT,
    (2, Face.BACK): RegionLabel.P2_INTERIOR_LEFT,
    (3, Face.ENDPOINT): RegionLabel.P3_OMEGA1,
    (3, Face.LEFT): RegionLabel.P3_OMEGA2,
    (3, Face.BACK): RegionLabel.P3_OMEGA3,
    (3, Face.RIGHT): RegionLabel.P3_OMEGA4,
}


# --- trajectories and controls ----------------------------------------------


@dataclass(frozen=True)
class MaturityTrajectory:
    """Piecewise-linear follicular maturities M_f(t) sampled at ``times``."""

    times: np.ndarray
    values: np.ndarray  # shape (n, len(times))

    def __post_init__(self):
        times = np.array(self.times, dtype=float)
        values = np.atleast_2d(np.array(self.values, dtype=float))
        if times.ndim != 1 or values.shape[1] != times.size:
            raise ValueError("trajectory values must have shape (n, len(times))")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, times, levels: Sequence[float]) -> "MaturityTrajectory":
        times = np.asarray(times, dtype=float)
        return cls(times, np.repeat(np.asarray(levels, dtype=float)[:, None], times.size, axis=1))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def t_lo(self) -> float:
        return float(self.times[0])

    @property
    def t_hi(self) -> float:
        return float(self.times[-1])

    @property
    def totals(self) -> np.ndarray:
        return self.values.sum(axis=0)

    def M_f(self, f: int, s):
        return np.interp(s, self.times, self.values[f])

    def total(self, s):
        return np.interp(s, self.times, self.totals)

    def restricted(self, t_lo: float, t_hi: float) -> "MaturityTrajectory":
        mask = (self.times >= t_lo - COVERAGE_TOL) & (self.times <= t_hi + COVERAGE_TOL)
        return MaturityTrajectory(self.times[mask], self.values[:, mask])

    def joined(self, later: "MaturityTrajectory") -> "MaturityTrajectory":
        """Concatenate ``later`` (starting at this trajectory's end) keeping this end value."""
        if abs(later.t_lo - self.t_hi) > COVERAGE_TOL:
            raise ValueError("trajectories do not share a joint")
        return MaturityTrajectory(np.concatenate([self.times, later.times[1:]]), np.concatenate([self.values, later.values[:, 1:]], axis=1))

    def sup_distance(self, other: "MaturityTrajectory") -> float:
        return float(np.max(np.abs(self.values - other.values))) if self.values.size else 0.0

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0


@dataclass(frozen=True)
class FrozenControls:
    """Open-loop control schedule u_f(t), U(t) replacing the maturity feedback."""

    times: np.ndarray
    u: np.ndarray  # shape (n, len(times))
    U: np.ndarray

    @classmethod
    def from_csv(cls, path, n: int) -> "FrozenControls":
        try:
            frame = pd.read_csv(Path(path), float_precision="round_trip")
        except FileNotFoundError as exc:
            raise ConfigError("frozen control file not found", path=str(path)) from exc
        needed = ["t"] + [f"u_{f + 1}" for f in range(n)] + ["U"]
        missing = [c for c in needed if c not in frame.columns]
        if missing:
            raise ConfigError("frozen control CSV lacks columns", missing=missing)
        frame = frame.sort_values("t")
        return cls(frame["t"].to_numpy(float), np.vstack([frame[f"u_{f + 1}"].to_numpy(float) for f in range(n)]), frame["U"].to_numpy(float))

    @classmethod
    def constant(cls, t_lo: float, t_hi: float, u: Sequence[float], U: float) -> "FrozenControls":
        times = np.array([t_lo, t_hi], dtype=float)
        return cls(times, np.repeat(np.asarray(u, dtype=float)[:, None], 2, axis=1), np.array([U, U], dtype=float))


def refine_knots(knots: np.ndarray, max_step: float) -> np.ndarray:
    """Insert equally spaced points so that no gap exceeds ``max_step``."""
    pieces = []
    for lo, hi in zip(knots[:-1], knots[1:]):
        count = max(1, int(np.ceil((hi - lo) / max_step - 1e-9)))
        pieces.append(np.linspace(lo, hi, count + 1)[:-1])
    pieces.append(knots[-1:])
    return np.concatenate(pieces)


@dataclass
class Advance:
    """Result of a batch integration leg."""

    s: np.ndarray
    x: np.ndarray
    y: np.ndarray
    log_jac: np.ndarray
    loss: np.ndarray
    face: np.ndarray


class Controls:
    """Frozen controls u_f(s), U(s) and the phase kinematics they induce."""

    def __init__(
        self,
        params: ModelParams,
        trajectory: MaturityTrajectory,
        hooks: TestHooks = TestHooks(),
        frozen: Optional[FrozenControls] = None,
        step: Optional[float] = None,
        validate: bool = True,
    ):
        if trajectory.n != params.n:
            raise ValueError("trajectory follicle count does not match params.n")
        self.params = params
        self.trajectory = trajectory
        self.hooks = hooks
        self.frozen = frozen
        self._totals = trajectory.totals
        knots = trajectory.times
        if frozen is not None:
            knots = np.union1d(knots, frozen.times[(frozen.times > knots[0]) & (frozen.times < knots[-1])])
        if step is None:
            span = max(knots[-1] - knots[0], 0.0)
            step = min(np.min(np.diff(knots)) if knots.size > 1 else params.T, 1e-3 * params.T) if span > 0 else 1e-3 * params.T
        self.step = float(step)
        self.grid = refine_knots(knots, self.step) if knots.size > 1 else knots.copy()
        self._cumulative_gbar: Dict[int, np.ndarray] = {}
        if validate:
            self.validate()

    @property
    def t_lo(self) -> float:
        return float(self.grid[0])

    @property
    def t_hi(self) -> float:
        return float(self.grid[-1])

    # controls

    def u(self, f: int, s):
        if self.frozen is not None:
            return np.interp(s, self.frozen.times, self.frozen.u[f])
        M_f = np.interp(s, self.trajectory.times, self.trajectory.values[f])
        M = np.interp(s, self.trajectory.times, self._totals)
        return mdl.local_control_u(M_f, M, s, f, self.params)

    def U(self, s):
        if self.frozen is not None:
            return np.interp(s, self.frozen.times, self.frozen.U)
        return mdl.global_control_U(np.interp(s, self.trajectory.times, self._totals), s, self.params)

    def validate(self) -> None:
        """Check the sign hypotheses at every step point and step midpoint."""
        samples = self.grid if self.grid.size < 2 else np.sort(np.concatenate([self.grid, 0.5 * (self.grid[1:] + self.grid[:-1])]))
        for f in range(self.params.n):
            mdl.check_sign_hypotheses(np.atleast_1d(self.u(f, samples)), f, self.params, t=samples)

    # kinematics

    def rates(self, phase: int, f: int, s, y):
        """(dx/ds, dy/ds, d(dy/ds)/dy, loss) for a phase at times s and heights y."""
        p = self.params
        if phase == Phase.LATE_PROLIFERATION:
            zeros = np.zeros_like(y)
            return np.full_like(y, mdl.velocity_ghat(f, p)), zeros, zeros, zeros
        u = self.u(f, s)
        if phase == Phase.EARLY_PROLIFERATION:
            vx = mdl.velocity_gbar(u, f, p) * np.ones_like(y)
            vy = mdl.velocity_hbar(y, u, f, p)
            dvy = mdl.dhbar_dy(y, u, f, p)
            loss = np.zeros_like(y) if self.hooks.zero_loss else mdl.loss_lbar(y, self.U(s), p)
        else:
            vx = np.full_like(y, mdl.velocity_gtilde(f, p))
            vy = mdl.velocity_htilde(y, u, f, p)
            dvy = mdl.dhtilde_dy(y, u, f, p)
            loss = np.zeros_like(y) if self.hooks.zero_loss else mdl.loss_ltilde(y, self.U(s), p)
        return vx, vy, dvy, loss

    def x_velocity(self, phase: int, f: int, s):
        p = self.params
        if phase == Phase.EARLY_PROLIFERATION:
            return mdl.velocity_gbar(self.u(f, s), f, p)
        if phase == Phase.LATE_PROLIFERATION:
            return mdl.velocity_ghat(f, p) * np.ones_like(np.asarray(s, dtype=float))
        return mdl.velocity_gtilde(f, p) * np.ones_like(np.asarray(s, dtype=float))

    def y_velocity(self, phase: int, f: int, s, y):
        if phase == Phase.LATE_PROLIFERATION:
            return np.zeros_like(np.asarray(y, dtype=float))
        return self.rates(phase, f, np.asarray(s, dtype=float), np.asarray(y, dtype=float))[1]

    def _rk4(self, phase: int, f: int, s, y, h):
        vx1, vy1, dj1, dl1 = self.rates(phase, f, s, y)
        vx2, vy2, dj2, dl2 = self.rates(phase, f, s + 0.5 * h, y + 0.5 * h * vy1)
        vx3, vy3, dj3, dl3 = self.rates(phase, f, s + 0.5 * h, y + 0.5 * h * vy2)
        vx4, vy4, dj4, dl4 = self.rates(phase, f, s + h, y + h * vy3)
        sixth = h / 6.0
        return (
            sixth * (vx1 + 2 * vx2 + 2 * vx3 + vx4),
            sixth * (vy1 + 2 * vy2 + 2 * vy3 + vy4),
            sixth * (dj1 + 2 * dj2 + 2 * dj3 + dj4),
            sixth * (dl1 + 2 * dl2 + 2 * dl3 + dl4),
        )

    def _next_knot(self, s, s_stop, direction: int):
        grid = self.grid
        if direction < 0:
            idx = np.searchsorted(grid, s, side="left") - 1
            nxt = np.where(idx >= 0, grid[np.clip(idx, 0, grid.size - 1)], -np.inf)
            return np.maximum(nxt, s_stop)
        idx = np.searchsorted(grid, s, side="right")
        nxt = np.where(idx < grid.size, grid[np.clip(idx, 0, grid.size - 1)], np.inf)
        return np.minimum(nxt, s_stop)

    @staticmethod
    def _margins(x, y, check_x: bool, check_y: bool):
        cols = []
        cols.append(x if check_x else np.full_like(x, np.inf))
        cols.append(1.0 - x if check_x else np.full_like(x, np.inf))
        cols.append(y if check_y else np.full_like(y, np.inf))
        cols.append(1.0 - y if check_y else np.full_like(y, np.inf))
        return np.stack(cols)

    def integrate(self, phase: int, f: int, s, x, y, s_stop, direction: int, check_x: bool = True, check_y: bool = True, path: Optional[list] = None) -> Advance:
        """Advance a batch along characteristics until ``s_stop`` or the first face crossing."""
        s = np.array(s, dtype=float, copy=True)
        x = np.array(x, dtype=float, copy=True)
        y = np.array(y, dtype=float, copy=True)
        s_stop = np.broadcast_to(np.asarray(s_stop, dtype=float), s.shape).copy()
        log_jac = np.zeros_like(s)
        loss = np.zeros_like(s)
        face = np.full(s.shape, int(Face.ENDPOINT))
        if phase == Phase.LATE_PROLIFERATION:
            return self._transport_exact(f, s, x, y, s_stop, direction, check_x, path)
        active = s != s_stop
        while True:
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            s_i = s[idx]
            nxt = self._next_knot(s_i, s_stop[idx], direction)
            h = nxt - s_i
            dx, dy, dj, dl = self._rk4(phase, f, s_i, y[idx], h)
            xn = x[idx] + dx
            yn = y[idx] + dy
            if not (np.all(np.isfinite(xn)) and np.all(np.isfinite(yn)) and np.all(np.isfinite(dj)) and np.all(np.isfinite(dl))):
                raise StepFailure("non-finite characteristic state", phase=int(phase), follicle=f)
            crossed = np.min(self._margins(xn, yn, check_x, check_y), axis=0) < 0
            ok = ~crossed
            done = idx[ok]
            s[done] = nxt[ok]
            x[done] = xn[ok]
            y[done] = yn[ok]
            log_jac[done] += dj[ok]
            loss[done] += dl[ok]
            active[done[nxt[ok] == s_stop[done]]] = False
            if crossed.any():
                hit = idx[crossed]
                theta, state = self._locate(phase, f, s[hit], x[hit], y[hit], np.abs(h[crossed]), direction, check_x, check_y)
                margins = self._margins(state[0], state[1], check_x, check_y)
                which = np.argmin(margins, axis=0)
                s[hit] = s[hit] + direction * theta
                x[hit] = np.where(which == 0, 0.0, np.where(which == 1, 1.0, state[0]))
                y[hit] = np.where(which == 2, 0.0, np.where(which == 3, 1.0, state[1]))
                log_jac[hit] += state[2]
                loss[hit] += state[3]
                face[hit] = np.array([Face.BACK, Face.FRONT, Face.LEFT, Face.RIGHT])[which]
                active[hit] = False
            if path is not None:
                path.append((float(s[0]), float(x[0]), float(y[0])))
        return Advance(s, x, y, log_jac, loss, face)

    def _locate(self, phase, f, s, x, y, h_abs, direction, check_x, check_y):
        """Bisection on the substep length for the first face crossing."""
        lo = np.zeros_like(h_abs)
        hi = h_abs.copy()
        iterations = int(np.ceil(np.log2(max(np.max(h_abs), EVENT_TOL) / EVENT_TOL))) + 1
        for _ in range(max(iterations, 1)):
            mid = 0.5 * (lo + hi)
            dx, dy, _, _ = self._rk4(phase, f, s, y, direction * mid)
            inside = np.min(self._margins(x + dx, y + dy, check_x, check_y), axis=0) >= 0
            lo = np.where(inside, mid, lo)
            hi = np.where(inside, hi, mid)
        dx, dy, dj, dl = self._rk4(phase, f, s, y, direction * hi)
        return hi, (x + dx, y + dy, dj, dl)

    def _transport_exact(self, f, s, x, y, s_stop, direction, check_x, path) -> Advance:
        speed = mdl.velocity_ghat(f, self.params)
        zeros = np.zeros_like(s)
        face = np.full(s.shape, int(Face.ENDPOINT))
        if direction < 0:
            x_end = x - speed * (s - s_stop)
            exits = check_x & (x_end < 0)
            s_new = np.where(exits, s - x / speed, s_stop)
            x_new = np.where(exits, 0.0, x_end)
            face[exits] = Face.BACK
        else:
            x_end = x + speed * (s_stop - s)
            exits = check_x & (x_end > 1)
            s_new = np.where(exits, s + (1.0 - x) / speed, s_stop)
            x_new = np.where(exits, 1.0, x_end)
            face[exits] = Face.FRONT
        if path is not None:
            path.append((float(s_new[0]), float(x_new[0]), float(y[0])))
        return Advance(s_new, x_new, y.copy(), zeros, zeros.copy(), face)

    # cumulative age transport in Phase 1

    def _cumulative(self, f: int) -> np.ndarray:
        if f not in self._cumulative_gbar:
            g = self.grid
            v0 = self.x_velocity(1, f, g[:-1])
            vm = self.x_velocity(1, f, 0.5 * (g[:-1] + g[1:]))
            v1 = self.x_velocity(1, f, g[1:])
            pieces = (g[1:] - g[:-1]) / 6.0 * (v0 + 4 * vm + v1)
            self._cumulative_gbar[f] = np.concatenate([[0.0], np.cumsum(pieces)])
        return self._cumulative_gbar[f]

    def _cumulative_at(self, f: int, s):
        s = np.clip(np.asarray(s, dtype=float), self.grid[0], self.grid[-1])
        cum = self._cumulative(f)
        idx = np.clip(np.searchsorted(self.grid, s, side="right") - 1, 0, self.grid.size - 1)
        base = self.grid[idx]
        dt = s - base
        partial = dt / 6.0 * (self.x_velocity(1, f, base) + 4 * self.x_velocity(1, f, base + 0.5 * dt) + self.x_velocity(1, f, s))
        return cum[idx] + partial

    def gbar_integral(self, f: int, s0, s1):
        """Integral of gbar(u_f) over [s0, s1] (Simpson on the step grid, i.e. RK4 on x)."""
        return self._cumulative_at(f, s1) - self._cumulative_at(f, s0)

    def gbar_entry_time(self, f: int, t, x):
        """Time theta with gbar_integral(theta, t) = x (the back-face entry time)."""
        t = np.broadcast_to(np.asarray(t, dtype=float), np.shape(x)).astype(float)
        target = self._cumulative_at(f, t) - np.asarray(x, dtype=float)
        lo = np.full_like(t, self.grid[0])
        hi = t.copy()
        for _ in range(64):
            mid = 0.5 * (lo + hi)
            above = self._cumulative_at(f, mid) >= target
            hi = np.where(above, mid, hi)
            lo = np.where(above, lo, mid)
            if np.all(hi - lo <= EVENT_TOL):
                break
        return 0.5 * (lo + hi)

    def advance_y(self, phase: int, f: int, s0, y0, s1):
        """Height reached at s1 by the characteristic through (s0, y0), ignoring faces."""
        s0, y0, s1 = np.broadcast_arrays(np.asarray(s0, dtype=float), np.asarray(y0, dtype=float), np.asarray(s1, dtype=float))
        out = np.array(y0, dtype=float, copy=True)
        for direction in (-1, 1):
            sel = (np.sign(s1 - s0) == direction)
            if np.any(sel):
                res = self.integrate(phase, f, s0[sel], np.full(int(sel.sum()), 0.5), y0[sel], s1[sel], direction, check_x=False, check_y=False)
                out[sel] = res.y
        return out

    def y_exit_time(self, phase: int, f: int, t, y, s_floor):
        """Backward exit time through y = 0 starting at (t, y); ``s_floor`` if none."""
        t, y = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(y, dtype=float))
        res = self.integrate(phase, f, t.ravel(), np.full(t.size, 0.5), y.ravel(), s_floor, -1, check_x=False, check_y=True)
        return res.s.reshape(t.shape), res.face.reshape(t.shape)


# --- public characteristic operations ----------------------------------------


@dataclass
class FlowResult:
    s: Any
    x: Any
    y: Any
    log_jac: Any
    loss: Any
    face: Any
    path: Optional[List[Tuple[float, float, float]]] = None


def _require_coverage(controls: Controls, *times) -> None:
    for t in times:
        t = np.asarray(t, dtype=float)
        if np.any(t < controls.t_lo - COVERAGE_TOL) or np.any(t > controls.t_hi + COVERAGE_TOL):
            raise WindowExceeded("time outside the trajectory window", t_lo=controls.t_lo, t_hi=controls.t_hi)


def flow(phase: int, follicle: int, start, t_end, controls: Controls, direction: str = "backward", record: bool = False) -> FlowResult:
    """Integrate the characteristic through ``start = (t0, x0, y0)`` towards ``t_end``.

    Returns the state at ``t_end`` or at the first face crossing (face and
    crossing time localized to 1e-12 in s). Scalars in give scalars out.
    ``log_jac`` and ``loss`` are integrals in the direction of travel, so a
    backward flow returns them negated.
    """
    t0, x0, y0 = (np.asarray(v, dtype=float) for v in start)
    scalar = t0.ndim == 0 and x0.ndim == 0 and y0.ndim == 0
    t0, x0, y0, t_end = np.broadcast_arrays(np.atleast_1d(t0), np.atleast_1d(x0), np.atleast_1d(y0), np.atleast_1d(np.asarray(t_end, dtype=float)))
    _require_coverage(controls, t0, t_end)
    sign = -1 if direction == "backward" else 1
    if np.any(sign * (t_end - t0) < 0):
        raise ValueError(f"t_end lies on the wrong side of t0 for a {direction} flow")
    path = [(float(t0[0]), float(x0[0]), float(y0[0]))] if record else None
    res = controls.integrate(phase, follicle, t0, x0, y0, t_end, sign, path=path)
    if scalar:
        return FlowResult(float(res.s[0]), float(res.x[0]), float(res.y[0]), float(res.log_jac[0]), float(res.loss[0]), Face(int(res.face[0])), path)
    return FlowResult(res.s, res.x, res.y, res.log_jac, res.loss, res.face, path)


@dataclass
class Segment:
    """One backward leg of a chain: from ``start`` back to ``entry``."""

    phase: int
    cycle: int
    follicle: int
    start: Tuple[float, float, float]
    entry: Tuple[float, float, float]
    entry_face: Face
    log_jac: float
    loss: float
    hop_factor: float = 1.0
    next_component: Optional[Tuple[int, int]] = None

    @property
    def exponential(self) -> float:
        return float(np.exp(-(self.loss + self.log_jac)))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "phase": int(self.phase),
            "cycle": self.cycle,
            "follicle": self.follicle + 1,
            "start": list(self.start),
            "entry": list(self.entry),
            "entry_face": FACE_NAMES[self.entry_face],
            "log_jacobian": self.log_jac,
            "loss_integral": self.loss,
            "exponential": self.exponential,
            "hop_factor": self.hop_factor,
            "next_component": None if self.next_component is None else list(self.next_component),
        }


@dataclass
class CharChain:
    terminal: Tuple[float, float, float, int, int, int]
    segments: List[Segment] = field(default_factory=list)
    anchor: str = "zero"
    anchor_value: float = 0.0
    value: float = 0.0

    @property
    def hops(self) -> int:
        return sum(1 for seg in self.segments if seg.next_component is not None)

    def to_dict(self) -> Dict[str, Any]:
        t, x, y, phase, cycle, follicle = self.terminal
        return {
            "terminal": {"t": t, "x": x, "y": y, "phase": phase, "cycle": cycle, "follicle": follicle + 1},
            "hops": self.hops,
            "anchor": self.anchor,
            "anchor_value": self.anchor_value,
            "value": self.value,
            "segments": [seg.to_dict() for seg in self.segments],
        }


def trace_batch(controls: Controls, anchor, f: int, phase, cycle, t, x, y, chains: Optional[List[CharChain]] = None) -> np.ndarray:
    """Evaluate the constructed densities at a batch of points of one follicle.

    Each point is followed backward through the coupled faces until it reaches
    the anchor time (value = datum x boundary factors x exponentials) or a
    zero-inflow face (value 0). ``anchor`` is an ``InitialData``.
    """
    p = controls.params
    phase_arr = np.array(np.broadcast_to(phase, np.shape(t)), dtype=int).ravel()
    cycle_arr = np.array(np.broadcast_to(cycle, np.shape(t)), dtype=int).ravel()
    s = np.array(t, dtype=float).ravel()
    xs = np.array(x, dtype=float).ravel()
    ys = np.array(y, dtype=float).ravel()
    size = s.size
    t_anchor = anchor.t_anchor
    _require_coverage(controls, s)
    if np.any(s < t_anchor - COVERAGE_TOL):
        raise WindowExceeded("evaluation time precedes the anchor time", t_anchor=t_anchor)

    weight = np.ones(size)
    log_factor = np.zeros(size)
    hops = np.zeros(size, dtype=int)
    value = np.zeros(size)
    live = np.ones(size, dtype=bool)
    gtilde = mdl.velocity_gtilde(f, p)
    ratio = p.a1 / p.a2

    while live.any():
        for ph in (1, 2, 3):
            idx = np.flatnonzero(live & (phase_arr == ph))
            if idx.size == 0:
                continue
            res = controls.integrate(ph, f, s[idx], xs[idx], ys[idx], t_anchor, -1)
            # backward sums carry the sign of the step; keep entry-to-start integrals
            seg_loss, seg_jac = -res.loss, -res.log_jac
            log_factor[idx] -= seg_loss + seg_jac
            start = (s[idx].copy(), xs[idx].copy(), ys[idx].copy())
            s[idx], xs[idx], ys[idx] = res.s, res.x, res.y
            factor = np.ones(idx.size)
            to_phase = np.zeros(idx.size, dtype=int)
            to_cycle = cycle_arr[idx].copy()
            k = cycle_arr[idx]

            if ph == 1:
                back = (res.face == Face.BACK) & (k >= 2)
                gbar = np.asarray(mdl.velocity_gbar(controls.u(f, res.s), f, p)) * np.ones(idx.size)
                factor = np.where(back, controls.hooks.mitosis_factor * p.tau_g[f] / (p.a1 * gbar), factor)
                to_phase = np.where(back, 2, 0)
                to_cycle = np.where(back, k - 1, k)
                new_x = np.where(back, 1.0, res.x)
                bad = (res.face == Face.RIGHT) | (res.face == Face.FRONT)
            elif ph == 2:
                back = res.face == Face.BACK
                gbar = np.asarray(mdl.velocity_gbar(controls.u(f, res.s), f, p)) * np.ones(idx.size)
                factor = np.where(back, p.a1 * gbar / p.tau_g[f], factor)
                to_phase = np.where(back, 1, 0)
                new_x = np.where(back, 1.0, res.x)
                bad = (res.face == Face.FRONT) | (res.face == Face.LEFT) | (res.face == Face.RIGHT)
            else:
                back = (res.face == Face.BACK) & (k >= 2)
                left = (res.face == Face.LEFT) & (res.x <= ratio + EVENT_TOL)
                to_phase = np.where(back, 3, np.where(left, 1, 0))
                to_cycle = np.where(back, k - 1, k)
                new_x = np.where(back, 1.0, np.where(left, np.minimum(res.x / ratio, 1.0), res.x))
                ys[idx] = np.where(left, 1.0, ys[idx])
                bad = res.face == Face.FRONT
            if np.any(bad):
                raise StepFailure("characteristic left through an outflow face while tracing backward", phase=ph, follicle=f)

            bottom = res.face == Face.ENDPOINT
            if chains is not None:
                for j, i in enumerate(idx):
                    chains[i].segments.append(
                        Segment(
                            phase=ph,
                            cycle=int(k[j]),
                            follicle=f,
                            start=(float(start[0][j]), float(start[1][j]), float(start[2][j])),
                            entry=(float(res.s[j]), float(res.x[j]), float(res.y[j])),
                            entry_face=Face(int(res.face[j])),
                            log_jac=float(seg_jac[j]),
                            loss=float(seg_loss[j]),
                            hop_factor=float(factor[j]) if to_phase[j] else 1.0,
                            next_component=(int(to_phase[j]), int(to_cycle[j])) if to_phase[j] else None,
                        )
                    )

            if bottom.any():
                done = idx[bottom]
                for (kk,) in set((int(c),) for c in cycle_arr[done]):
                    sel = done[cycle_arr[done] == kk]
                    datum = anchor.component(f, ph, kk)(xs[sel], ys[sel])
                    value[sel] = weight[sel] * np.exp(log_factor[sel]) * datum
                    if chains is not None:
                        for j, i in enumerate(sel):
                            chains[i].anchor = "initial"
                            chains[i].anchor_value = float(datum[j])
                live[done] = False

            hopping = to_phase > 0
            dead = ~bottom & ~hopping
            live[idx[dead]] = False
            moved = idx[hopping]
            weight[moved] *= factor[hopping]
            phase_arr[moved] = to_phase[hopping]
            cycle_arr[moved] = to_cycle[hopping]
            xs[moved] = new_x[hopping]
            hops[moved] += 1
            if np.any(hops > 2 * p.N):
                raise ChainOverflow("backtrace exceeded the hop budget", follicle=f, N=p.N)

    if chains is not None:
        for i in range(size):
            chains[i].value = float(value[i])
    return value


def backtrace(t: float, x: float, y: float, phase: int, cycle: int, follicle: int, controls: Controls, anchor) -> CharChain:
    """Back-trace one point and return the full chain with its hop records."""
    chain = CharChain(terminal=(float(t), float(x), float(y), int(phase), int(cycle), int(follicle)))
    trace_batch(controls, anchor, follicle, phase, cycle, np.array([t]), np.array([x]), np.array([y]), chains=[chain])
    return chain


def first_leg_faces(controls: Controls, f: int, phase: int, t, x, y, t_anchor: float) -> np.ndarray:
    t, x, y = np.broadcast_arrays(*(np.atleast_1d(np.asarray(v, dtype=float)) for v in (t, x, y)))
    return controls.integrate(phase, f, t, x, y, t_anchor, -1).face


def classify_batch(controls: Controls, f: int, phase: int, t, x, y, t_anchor: float = 0.0) -> List[RegionLabel]:
    """Region labels from the separating curves; near-ties follow the back-trace."""
    p = controls.params
    t, x, y = np.broadcast_arrays(*(np.atleast_1d(np.asarray(v, dtype=float)) for v in (t, x, y)))
    t, x, y = t.ravel(), x.ravel(), y.ravel()
    size = t.size
    gap = np.full(size, np.inf)
    labels = np.empty(size, dtype=object)

    if phase == Phase.LATE_PROLIFERATION:
        threshold = mdl.velocity_ghat(f, p) * (t - t_anchor)
        labels[:] = np.where(x >= threshold, RegionLabel.P2_INTERIOR_RIGHT, RegionLabel.P2_INTERIOR_LEFT)
        gap = np.abs(x - threshold)
    elif phase == Phase.EARLY_PROLIFERATION:
        reach = np.asarray(controls.gbar_integral(f, t_anchor, t))
        far = x >= reach
        lower = controls.advance_y(1, f, np.full(size, t_anchor), np.zeros(size), t)
        theta = controls.gbar_entry_time(f, t, np.minimum(x, reach))
        eta = controls.advance_y(1, f, theta, np.zeros(size), t)
        curve = np.where(far, lower, eta)
        labels[:] = np.where(y < curve, RegionLabel.P1_OMEGA3, np.where(far, RegionLabel.P1_OMEGA1, RegionLabel.P1_OMEGA2))
        gap = np.minimum(np.abs(y - curve), np.abs(x - reach))
    else:
        speed = mdl.velocity_gtilde(f, p)
        reach = speed * (t - t_anchor)
        far = x >= reach
        theta = np.where(far, t_anchor, t - x / speed)
        eta1 = controls.advance_y(3, f, theta, np.zeros(size), t)
        eta2 = controls.advance_y(3, f, theta, np.ones(size), t)
        middle = np.where(far, RegionLabel.P3_OMEGA1, RegionLabel.P3_OMEGA3)
        labels[:] = np.where(y > eta2, RegionLabel.P3_OMEGA4, np.where(y < eta1, RegionLabel.P3_OMEGA2, middle))
        gap = np.minimum(np.minimum(np.abs(y - eta1), np.abs(y - eta2)), np.abs(x - reach))

    ties = np.flatnonzero(gap < TIE_TOL)
    if ties.size:
        faces = first_leg_faces(controls, f, phase, t[ties], x[ties], y[ties], t_anchor)
        for i, face in zip(ties, faces):
            labels[i] = FIRST_LEG_LABELS[(int(phase), Face(int(face)))]
    return [RegionLabel(label) for label in labels]


def classify(t: float, x: float, y: float, phase: int, follicle: int, controls: Controls, t_anchor: float = 0.0) -> RegionLabel:
    return classify_batch(controls, follicle, phase, t, x, y, t_anchor)[0]


# --- Jacobian factors ----------------------------------------------------------


def face_velocity(segment: Segment, controls: Controls) -> float:
    s_entry, _, y_entry = segment.entry
    face = segment.entry_face
    if face == Face.ENDPOINT:
        return 1.0
    if face in (Face.BACK, Face.FRONT):
        return float(abs(np.asarray(controls.x_velocity(segment.phase, segment.follicle, s_entry))))
    return float(abs(np.asarray(controls.y_velocity(segment.phase, segment.follicle, s_entry, y_entry))))


def jacobian_factor(segment: Segment, controls: Controls) -> float:
    """|det d(x, y)/d(entry coordinates)| for the segment's entry face.

    Bottom entries carry exp(int dh/dy); back/front entries also carry the
    x-velocity and left/right entries the y-velocity at the entry time.
    """
    velocity = face_velocity(segment, controls)
    if velocity < DEGENERATE_VELOCITY:
        raise DegenerateVelocity("face velocity vanishes at the entry point", face=FACE_NAMES[segment.entry_face], velocity=velocity)
    return velocity * float(np.exp(segment.log_jac)) * (1.0 + controls.hooks.jacobian_perturbation)


def finite_difference_jacobian(segment: Segment, controls: Controls, eps: float = 1e-6) -> float:
    """Finite-difference determinant of the forward flow map from the entry face."""
    t_end = segment.start[0]
    s_e, x_e, y_e = segment.entry
    face = segment.entry_face

    def forward(s0, x0, y0):
        res = controls.integrate(segment.phase, segment.follicle, np.atleast_1d(float(s0)), np.atleast_1d(float(x0)), np.atleast_1d(float(y0)), t_end, 1, check_x=False, check_y=False)
        return np.array([res.x[0], res.y[0]])

    if face == Face.ENDPOINT:
        d1 = (forward(s_e, x_e + eps, y_e) - forward(s_e, x_e - eps, y_e)) / (2 * eps)
        d2 = (forward(s_e, x_e, y_e + eps) - forward(s_e, x_e, y_e - eps)) / (2 * eps)
    elif face in (Face.BACK, Face.FRONT):
        d1 = (forward(s_e + eps, x_e, y_e) - forward(s_e - eps, x_e, y_e)) / (2 * eps)
        d2 = (forward(s_e, x_e, y_e + eps) - forward(s_e, x_e, y_e - eps)) / (2 * eps)
    else:
        d1 = (forward(s_e + eps, x_e, y_e) - forward(s_e - eps, x_e, y_e)) / (2 * eps)
        d2 = (forward(s_e, x_e + eps, y_e) - forward(s_e, x_e - eps, y_e)) / (2 * eps)
    return float(abs(d1[0] * d2[1] - d1[1] * d2[0]))
