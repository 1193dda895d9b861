"""Evaluation of the constructed densities and the functionals built on them."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import Polynomial

from . import model as mdl
from .characteristics import CharChain, Controls, backtrace, trace_batch
from .errors import BoundViolation, InvalidTestFunction, QuadratureFailure
from .initial_data import GridDensity, InitialData
from .model import COMPONENT_TAGS, ModelParams, Phase
from .quadrature import QuadraturePlan, interval_rule, strip_rule, tensor_rule

logger = logging.getLogger(__name__)

ComponentKey = Tuple[int, int, int]
AREA_TOL = 1e-8
OVERLAP_TOL = 1e-9


@dataclass(frozen=True)
class MaturitySnapshot:
    t: float
    per_follicle: np.ndarray

    @property
    def total(self) -> float:
        return float(np.sum(self.per_follicle))

    def to_dict(self) -> Dict[str, Any]:
        return {"t": self.t, "M_f": [float(v) for v in self.per_follicle], "M": self.total}


@dataclass
class RegionPiece:
    """Quadrature nodes of one region of the unit square, one row per time."""

    x: np.ndarray
    y: np.ndarray
    w: np.ndarray
    needs_previous_cycle: bool = False


@dataclass
class NodeBlock:
    phase: int
    cycle: int
    x: np.ndarray
    y: np.ndarray
    w: np.ndarray


class SolutionHandle:
    """Densities of all follicles for a frozen trajectory and a chain of anchors.

    ``anchors`` are ``InitialData`` objects ordered by ``t_anchor``; a point at
    time t is traced back to the latest anchor not after t.
    """

    def __init__(
        self,
        params: ModelParams,
        controls: Controls,
        anchors: Sequence[InitialData],
        plan: QuadraturePlan = QuadraturePlan(),
        threads: int = 1,
        chunk_size: int = 4096,
        scales: Optional[Mapping[ComponentKey, float]] = None,
    ):
        if not anchors:
            raise ValueError("at least one anchor is required")
        self.params = params
        self.controls = controls
        self.anchors = sorted(anchors, key=lambda a: a.t_anchor)
        self.plan = plan
        self.threads = max(1, int(threads))
        self.chunk_size = max(1, int(chunk_size))
        self.scales = dict(scales or {})
        self._anchor_times = np.array([a.t_anchor for a in self.anchors])

    @property
    def horizon(self) -> float:
        return self.controls.t_hi

    @property
    def initial_data(self) -> InitialData:
        return self.anchors[0]

    def with_plan(self, plan: QuadraturePlan) -> "SolutionHandle":
        return SolutionHandle(self.params, self.controls, self.anchors, plan, self.threads, self.chunk_size, self.scales)

    def perturbed(self, key: ComponentKey, factor: float) -> "SolutionHandle":
        """Copy whose component ``key`` is multiplied by ``factor`` wherever it is evaluated."""
        scales = dict(self.scales)
        scales[key] = scales.get(key, 1.0) * factor
        return SolutionHandle(self.params, self.controls, self.anchors, self.plan, self.threads, self.chunk_size, scales)

    def anchor_index(self, t) -> np.ndarray:
        return np.clip(np.searchsorted(self._anchor_times, np.asarray(t, dtype=float), side="right") - 1, 0, len(self.anchors) - 1)

    # --- pointwise evaluation -------------------------------------------------

    def _trace(self, anchor: InitialData, f: int, phase, cycle, t, x, y) -> np.ndarray:
        size = t.size
        if size == 0 or anchor.is_zero:
            return np.zeros(size)
        starts = list(range(0, size, self.chunk_size))

        def run(start: int) -> np.ndarray:
            sl = slice(start, start + self.chunk_size)
            return trace_batch(self.controls, anchor, f, phase[sl], cycle[sl], t[sl], x[sl], y[sl])

        if self.threads > 1 and len(starts) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                parts = list(pool.map(run, starts))
        else:
            parts = [run(start) for start in starts]
        return np.concatenate(parts)

    def evaluate_many(self, f: int, phase, cycle, t, x, y) -> np.ndarray:
        """Densities of follicle ``f`` at points with per-point phase and cycle."""
        t, x, y, phase, cycle = np.broadcast_arrays(
            np.asarray(t, dtype=float), np.asarray(x, dtype=float), np.asarray(y, dtype=float), np.asarray(phase, dtype=int), np.asarray(cycle, dtype=int)
        )
        shape = t.shape
        t, x, y, phase, cycle = (a.ravel() for a in (t, x, y, phase, cycle))
        out = np.zeros(t.size)
        which = self.anchor_index(t)
        for i, anchor in enumerate(self.anchors):
            sel = np.flatnonzero(which == i)
            if sel.size:
                out[sel] = self._trace(anchor, f, phase[sel], cycle[sel], t[sel], x[sel], y[sel])
        for (sf, sp, sk), factor in self.scales.items():
            if sf == f:
                out[(phase == sp) & (cycle == sk)] *= factor
        return out.reshape(shape)

    def evaluate(self, f: int, phase: int, cycle: int, t, x, y) -> np.ndarray:
        return self.evaluate_many(f, phase, cycle, t, x, y)

    def field(self, f: int, phase: int, cycle: int) -> "DensityField":
        return DensityField(self, f, int(phase), int(cycle))

    def chain(self, f: int, phase: int, cycle: int, t: float, x: float, y: float) -> CharChain:
        anchor = self.anchors[int(self.anchor_index(t))]
        return backtrace(t, x, y, phase, cycle, f, self.controls, anchor)

    # --- region decomposition -------------------------------------------------

    def regions(self, f: int, phase: int, times, t_anchor: float, plan: Optional[QuadraturePlan] = None) -> List[RegionPiece]:
        """Quadrature pieces aligned with the separating curves at each time.

        Regions where every density vanishes are left out. Pieces flagged
        ``needs_previous_cycle`` only carry mass for cycles k >= 2.
        """
        plan = plan or self.plan
        q, s = plan.order, plan.strips
        ctl = self.controls
        p = self.params
        times = np.atleast_1d(np.asarray(times, dtype=float))
        m = times.size
        zeros, ones = np.zeros(m), np.ones(m)
        ta = np.full(m, t_anchor)
        pieces: List[RegionPiece] = []

        if phase == Phase.EARLY_PROLIFERATION:
            reach = np.clip(ctl.gbar_integral(f, ta, times), 0.0, 1.0)
            lower = np.clip(ctl.advance_y(1, f, ta, zeros, times), 0.0, 1.0)
            pieces.append(RegionPiece(*tensor_rule((reach, ones), (lower, ones), q, s)))

            def entry_curve(xn):
                T = np.broadcast_to(times[:, None], xn.shape)
                theta = ctl.gbar_entry_time(f, T, xn)
                return np.clip(ctl.advance_y(1, f, theta, np.zeros_like(xn), T), 0.0, 1.0), np.ones_like(xn)

            pieces.append(RegionPiece(*strip_rule((zeros, reach), entry_curve, q, s), needs_previous_cycle=True))

        elif phase == Phase.LATE_PROLIFERATION:
            speed = mdl.velocity_ghat(f, p)
            reach = np.clip(speed * (times - t_anchor), 0.0, 1.0)
            pieces.append(RegionPiece(*tensor_rule((reach, ones), (zeros, ones), q, s)))
            xo, _ = interval_rule(zeros, reach, q, s)
            T = np.broadcast_to(times[:, None], xo.shape)
            cut = np.clip(ctl.advance_y(1, f, np.full(xo.shape, t_anchor), np.zeros(xo.shape), T - xo / speed), 0.0, 1.0)
            pieces.append(RegionPiece(*strip_rule((zeros, reach), lambda xn: (np.zeros_like(xn), cut), q, s)))
            pieces.append(RegionPiece(*strip_rule((zeros, reach), lambda xn: (cut, np.ones_like(xn)), q, s)))

        else:
            speed = mdl.velocity_gtilde(f, p)
            ratio = p.a1 / p.a2
            raw_reach = speed * (times - t_anchor)
            reach = np.clip(raw_reach, 0.0, 1.0)
            lo = np.clip(ctl.advance_y(3, f, ta, zeros, times), 0.0, 1.0)
            up = np.clip(ctl.advance_y(3, f, ta, ones, times), 0.0, 1.0)
            pieces.append(RegionPiece(*tensor_rule((reach, ones), (lo, up), q, s)))

            # inflow from the Phase-1 top face, parametrized by height
            yo, _ = interval_rule(zeros, lo, q, s)
            T = np.broadcast_to(times[:, None], yo.shape)
            t0, _ = ctl.y_exit_time(3, f, T, yo, t_anchor)
            x_eta = np.clip(speed * (T - t0), 0.0, 1.0)
            x_end = np.clip(x_eta + ratio, 0.0, 1.0)
            x_split = np.minimum(x_eta + ratio * np.clip(ctl.gbar_integral(f, np.full(t0.shape, t_anchor), t0), 0.0, 1.0), x_end)
            for lo_x, hi_x, previous in ((x_eta, x_split, True), (x_split, x_end, False)):
                y_n, x_n, w_n = strip_rule((zeros, lo), lambda yn, a=lo_x, b=hi_x: (a, b), q, s)
                pieces.append(RegionPiece(x_n, y_n, w_n, needs_previous_cycle=previous))

            # transfer from the previous cycle through x = 0
            xo, _ = interval_rule(zeros, reach, q, s)
            T = np.broadcast_to(times[:, None], xo.shape)
            eta1 = np.clip(ctl.advance_y(3, f, T - xo / speed, np.zeros(xo.shape), T), 0.0, 1.0)
            lo_b = np.broadcast_to(lo[:, None], xo.shape)
            if np.any(eta1 > lo_b + OVERLAP_TOL):
                raise QuadratureFailure("entry curve crosses the lower separator", follicle=f, phase=3)
            eta1 = np.minimum(eta1, lo_b)
            top = np.where(raw_reach <= 1.0, up, 1.0)
            pieces.append(RegionPiece(*strip_rule((zeros, reach), lambda xn: (eta1, lo_b), q, s), needs_previous_cycle=True))
            pieces.append(RegionPiece(*tensor_rule((zeros, reach), (lo, top), q, s), needs_previous_cycle=True))

        area = sum(np.sum(piece.w, axis=-1) for piece in pieces)
        if np.any(area > 1.0 + AREA_TOL):
            raise QuadratureFailure("region decomposition overlaps", follicle=f, phase=int(phase), area=float(np.max(area)))
        return pieces

    def node_blocks(self, f: int, times, t_anchor: float, plan: Optional[QuadraturePlan] = None, components: Optional[Sequence[Tuple[int, int]]] = None) -> List[NodeBlock]:
        wanted = set(components) if components is not None else None
        blocks = []
        for phase in (1, 2, 3):
            if wanted is not None and not any(ph == phase for ph, _ in wanted):
                continue
            pieces = self.regions(f, phase, times, t_anchor, plan)
            for k in range(1, self.params.N + 1):
                if wanted is not None and (phase, k) not in wanted:
                    continue
                for piece in pieces:
                    if piece.needs_previous_cycle and k == 1:
                        continue
                    blocks.append(NodeBlock(phase, k, piece.x, piece.y, piece.w))
        return blocks

    def block_values(self, f: int, times, blocks: List[NodeBlock]) -> List[np.ndarray]:
        """Evaluate all node blocks of a follicle in one batched trace."""
        if not blocks:
            return []
        times = np.atleast_1d(np.asarray(times, dtype=float))
        T = np.concatenate([np.broadcast_to(times[:, None], b.x.shape) for b in blocks], axis=1)
        X = np.concatenate([b.x for b in blocks], axis=1)
        Y = np.concatenate([b.y for b in blocks], axis=1)
        P = np.concatenate([np.full(b.x.shape, b.phase) for b in blocks], axis=1)
        K = np.concatenate([np.full(b.x.shape, b.cycle) for b in blocks], axis=1)
        values = self.evaluate_many(f, P, K, T, X, Y)
        out, start = [], 0
        for b in blocks:
            width = b.x.shape[1]
            out.append(values[:, start : start + width])
            start += width
        return out

    def _anchor_groups(self, times: np.ndarray):
        which = self.anchor_index(times)
        for i, anchor in enumerate(self.anchors):
            sel = np.flatnonzero(which == i)
            if sel.size:
                yield sel, anchor

    def integrals(self, times, weight: Callable[[np.ndarray, int], np.ndarray], plan: Optional[QuadraturePlan] = None) -> np.ndarray:
        """Per-follicle sums over components of the weighted density integrals, shape (n, len(times))."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        out = np.zeros((self.params.n, times.size))
        for sel, anchor in self._anchor_groups(times):
            if anchor.is_zero and not self.scales:
                continue
            for f in range(self.params.n):
                blocks = self.node_blocks(f, times[sel], anchor.t_anchor, plan)
                for block, values in zip(blocks, self.block_values(f, times[sel], blocks)):
                    out[f, sel] += np.sum(block.w * weight(block.y, block.phase) * values, axis=1)
        return out

    # --- functionals ----------------------------------------------------------

    def maturities(self, times, plan: Optional[QuadraturePlan] = None) -> np.ndarray:
        return self.integrals(times, lambda y, phase: mdl.maturity_weight(y, phase, self.params), plan)

    def maturity(self, t: float) -> MaturitySnapshot:
        return MaturitySnapshot(float(t), self.maturities([t])[:, 0])

    def total_mass(self, t: float) -> np.ndarray:
        """Physical mass per follicle (unit-square integrals times the box areas)."""
        return self.integrals([t], lambda y, phase: mdl.mass_weight(phase, self.params) * np.ones_like(y))[:, 0]

    def sample_grid(self, t: float, resolution: int) -> Dict[ComponentKey, np.ndarray]:
        """Cell-center values of every component at time t, arrays of shape (res, res)."""
        centers = (np.arange(resolution) + 0.5) / resolution
        X, Y = np.meshgrid(centers, centers, indexing="ij")
        grids: Dict[ComponentKey, np.ndarray] = {}
        for f in range(self.params.n):
            keys = [(phase, k) for phase in (1, 2, 3) for k in range(1, self.params.N + 1)]
            P = np.concatenate([np.full(X.size, phase) for phase, _ in keys])
            K = np.concatenate([np.full(X.size, k) for _, k in keys])
            values = self.evaluate_many(f, P, K, np.full(P.size, t), np.tile(X.ravel(), len(keys)), np.tile(Y.ravel(), len(keys)))
            for i, (phase, k) in enumerate(keys):
                grids[(f, phase, k)] = values[i * X.size : (i + 1) * X.size].reshape(X.shape)
        return grids

    def reanchor(self, t: float, resolution: int) -> InitialData:
        """Represent the solution at time t as grid-backed data attached to t."""
        grids = self.sample_grid(t, resolution)
        components = {key: GridDensity(values) for key, values in grids.items() if np.any(values > 0)}
        logger.info("re-anchored at t=%.6g on a %dx%d grid", t, resolution, resolution)
        return InitialData(self.params, components, t_anchor=t)

    def l1_distance(self, t1: float, t2: float, resolution: int) -> float:
        """Midpoint-rule L1 distance between the solutions at two times (all components)."""
        a = self.sample_grid(t1, resolution)
        b = self.sample_grid(t2, resolution)
        return float(sum(np.sum(np.abs(a[key] - b[key])) for key in a) / resolution**2)


@dataclass(frozen=True)
class DensityField:
    """One component phi^f_{phase, k} of a solution."""

    handle: SolutionHandle
    follicle: int
    phase: int
    cycle: int

    @property
    def name(self) -> str:
        return f"{COMPONENT_TAGS[Phase(self.phase)]}_{self.cycle}"

    def __call__(self, t, x, y):
        return self.handle.evaluate(self.follicle, self.phase, self.cycle, t, x, y)

    def grid(self, t: float, resolution: int) -> np.ndarray:
        centers = (np.arange(resolution) + 0.5) / resolution
        X, Y = np.meshgrid(centers, centers, indexing="ij")
        return self(np.full(X.shape, t), X, Y)


def evaluate(density: DensityField, t, x, y):
    """Density value(s) of a field; scalars in give a float out."""
    values = density(t, x, y)
    return float(values) if np.ndim(values) == 0 else values


# --- test functions and the weak form ---------------------------------------


def _random_poly(rng: np.random.Generator, degree: int) -> Polynomial:
    return Polynomial(rng.uniform(-1.0, 1.0, degree + 1))


VANISH_ZERO = Polynomial([0.0, 1.0])
VANISH_ONE = Polynomial([1.0, -1.0])


class TestFunction:
    """Vector of C1 test fields psi(t, x, y) = T(t / tau) X(x) Y(y) per component."""

    __test__ = False

    def __init__(self, params: ModelParams, tau: float, factors: Mapping[ComponentKey, Tuple[Polynomial, Polynomial, Polynomial]]):
        self.params = params
        self.tau = float(tau)
        self.factors = dict(factors)

    @classmethod
    def random(cls, params: ModelParams, tau: float, rng: np.random.Generator) -> "TestFunction":
        factors = {}
        for f in range(params.n):
            for phase in (1, 2, 3):
                for k in range(1, params.N + 1):
                    T = VANISH_ONE * _random_poly(rng, 4)
                    if k == 1 and phase in (Phase.EARLY_PROLIFERATION, Phase.DIFFERENTIATION):
                        X = VANISH_ZERO * VANISH_ONE * _random_poly(rng, 3)
                    else:
                        X = VANISH_ONE * _random_poly(rng, 4)
                    if phase == Phase.DIFFERENTIATION:
                        Y = _random_poly(rng, 5)
                    else:
                        Y = VANISH_ZERO * VANISH_ONE * _random_poly(rng, 3)
                    factors[(f, phase, k)] = (T, X, Y)
        return cls(params, tau, factors)

    def validate(self, tol: float = 1e-12) -> None:
        for (f, phase, k), (T, X, Y) in self.factors.items():
            required = [("t = tau", T(1.0)), ("x = 1", X(1.0))]
            if k == 1 and phase in (Phase.EARLY_PROLIFERATION, Phase.DIFFERENTIATION):
                required.append(("x = 0", X(0.0)))
            if phase != Phase.DIFFERENTIATION:
                required += [("y = 0", Y(0.0)), ("y = 1", Y(1.0))]
            for face, value in required:
                if abs(value) > tol:
                    raise InvalidTestFunction("test function does not vanish", follicle=f + 1, phase=phase, cycle=k, face=face, value=float(value))

    def parts(self, key: ComponentKey):
        return self.factors.get(key)

    def value(self, key: ComponentKey, t, x, y):
        T, X, Y = self.factors[key]
        return T(np.asarray(t) / self.tau) * X(np.asarray(x)) * Y(np.asarray(y))

    def gradient(self, key: ComponentKey, t, x, y):
        T, X, Y = self.factors[key]
        s = np.asarray(t) / self.tau
        x = np.asarray(x)
        y = np.asarray(y)
        return (
            T.deriv()(s) / self.tau * X(x) * Y(y),
            T(s) * X.deriv()(x) * Y(y),
            T(s) * X(x) * Y.deriv()(y),
        )


@dataclass
class WeakFormTerms:
    interior: float = 0.0
    initial: float = 0.0
    differentiation_inflow: float = 0.0
    mitosis: float = 0.0
    differentiation_transfer: float = 0.0
    proliferation_transfer: float = 0.0

    def as_dict(self) -> Dict[str, float]:
        return dict(self.__dict__)

    @property
    def residual(self) -> float:
        return abs(sum(self.as_dict().values()))

    @property
    def scale(self) -> float:
        return max(abs(v) for v in self.as_dict().values())


def weak_form_terms(handle: SolutionHandle, test: TestFunction, tau: float, plan: Optional[QuadraturePlan] = None, time_strips: int = 2, face_strips: int = 4) -> WeakFormTerms:
    """Every term of the integral identity a weak solution satisfies on [0, tau]."""
    if tau > handle.horizon + 1e-12:
        raise ValueError("tau exceeds the solved horizon")
    test.validate()
    p = handle.params
    ctl = handle.controls
    plan = plan or handle.plan
    q = plan.order
    terms = WeakFormTerms()

    tn, tw = interval_rule(0.0, tau, q, time_strips)
    for sel, anchor in handle._anchor_groups(tn):
        for f in range(p.n):
            blocks = handle.node_blocks(f, tn[sel], anchor.t_anchor, plan)
            for block, values in zip(blocks, handle.block_values(f, tn[sel], blocks)):
                key = (f, block.phase, block.cycle)
                T = np.broadcast_to(tn[sel][:, None], block.x.shape)
                vx, vy, _, loss = ctl.rates(block.phase, f, T, block.y)
                psi = test.value(key, T, block.x, block.y)
                dt, dx, dy = test.gradient(key, T, block.x, block.y)
                integrand = values * (dt + vx * dx + vy * dy - loss * psi)
                terms.interior += float(np.sum(tw[sel] * np.sum(block.w * integrand, axis=1)))

    initial = handle.initial_data
    X0, Y0, W0 = tensor_rule((0.0, 1.0), (0.0, 1.0), q, face_strips)
    for key in test.factors:
        datum = initial.component(*key)(X0, Y0)
        terms.initial += float(np.sum(W0 * datum * test.value(key, 0.0, X0, Y0)))

    Tf, Yf, Wf = tensor_rule((0.0, tau), (0.0, 1.0), q, face_strips)
    ones = np.ones_like(Tf)
    for f in range(p.n):
        gbar = mdl.velocity_gbar(ctl.u(f, Tf), f, p)
        ghat = mdl.velocity_ghat(f, p)
        gtilde = mdl.velocity_gtilde(f, p)
        for k in range(1, p.N + 1):
            upstream_bar = handle.evaluate(f, 1, k, Tf, ones, Yf)
            terms.proliferation_transfer += float(np.sum(Wf * ghat * p.a1 * gbar / p.tau_g[f] * upstream_bar * test.value((f, 2, k), Tf, 0.0, Yf)))
            if k >= 2:
                upstream_hat = handle.evaluate(f, 2, k - 1, Tf, ones, Yf)
                factor = ctl.hooks.mitosis_factor * p.tau_g[f] / p.a1
                terms.mitosis += float(np.sum(Wf * factor * upstream_hat * test.value((f, 1, k), Tf, 0.0, Yf)))
                upstream_tilde = handle.evaluate(f, 3, k - 1, Tf, ones, Yf)
                terms.differentiation_transfer += float(np.sum(Wf * gtilde * upstream_tilde * test.value((f, 3, k), Tf, 0.0, Yf)))

        # Phase-3 bottom inflow, supported on x <= a1 / a2
        Ti, Xi, Wi = tensor_rule((0.0, tau), (0.0, p.a1 / p.a2), q, face_strips)
        inflow_speed = mdl.velocity_htilde(0.0, ctl.u(f, Ti), f, p)
        for k in range(1, p.N + 1):
            trace = handle.evaluate(f, 1, k, Ti, np.minimum(Xi * p.a2 / p.a1, 1.0), np.ones_like(Ti))
            terms.differentiation_inflow += float(np.sum(Wi * inflow_speed * trace * test.value((f, 3, k), Ti, Xi, 0.0)))
    return terms


def weak_residual(handle: SolutionHandle, test: TestFunction, tau: float, **kwargs) -> float:
    return weak_form_terms(handle, test, tau, **kwargs).residual


def trace_mismatch(handle: SolutionHandle, times, heights) -> float:
    """Largest relative gap in phi_hat_k(t, 0, y) = a1 gbar / tau_g * phi_bar_k(t, 1, y)."""
    p = handle.params
    T, Y = np.meshgrid(np.asarray(times, dtype=float), np.asarray(heights, dtype=float), indexing="ij")
    worst = 0.0
    for f in range(p.n):
        factor = p.a1 * mdl.velocity_gbar(handle.controls.u(f, T), f, p) / p.tau_g[f]
        for k in range(1, p.N + 1):
            left = handle.evaluate(f, 2, k, T, np.zeros_like(T), Y)
            right = factor * handle.evaluate(f, 1, k, T, np.ones_like(T), Y)
            scale = max(float(np.max(np.abs(right))), 1e-300)
            worst = max(worst, float(np.max(np.abs(left - right))) / scale if np.any(right) or np.any(left) else 0.0)
    return worst


# --- a-priori bounds ----------------------------------------------------------


@dataclass
class BoundsReport:
    K: float
    max_maturity: float
    min_maturity: float
    density_bounds: List[float]
    max_density_ratio: float
    samples: int
    passed: bool = True
    offending: Optional[Dict[str, Any]] = None

    @property
    def slack(self) -> float:
        return self.K - self.max_maturity

    def to_dict(self) -> Dict[str, Any]:
        data = dict(self.__dict__)
        data["slack"] = self.slack
        return data


def density_bound(initial: InitialData, f: int, constants, horizon: float) -> float:
    """The a-priori sup bound on phi^f over [0, horizon]."""
    p = initial.params
    K1, K2 = constants.K1, constants.K2
    tau_g = p.tau_g[f]
    bar = (2 * K1 / K2 + p.a1 * K1 / tau_g) ** p.N
    hat = (2 * K1 / K2 + 2 * tau_g / (p.a1 * K2)) ** p.N
    worst = 0.0
    for k in range(1, p.N + 1):
        worst = max(worst, bar * initial.sup_norm(f, 1, k), hat * initial.sup_norm(f, 2, k), initial.sup_norm(f, 3, k))
    return float(np.exp(2 * (p.N + 1) * horizon * K1) * worst)


def check_bounds(handle: SolutionHandle, trajectory, constants, samples: int = 10000, seed: int = 0, raise_on_failure: bool = True) -> BoundsReport:
    """Check 0 <= M <= K on the trajectory and the sup bound at random points."""
    p = handle.params
    values = trajectory.values
    report = BoundsReport(
        K=float(constants.K),
        max_maturity=float(np.max(values)) if values.size else 0.0,
        min_maturity=float(np.min(values)) if values.size else 0.0,
        density_bounds=[density_bound(handle.initial_data, f, constants, handle.horizon) for f in range(p.n)],
        max_density_ratio=0.0,
        samples=samples,
    )
    tol = 1e-12 * max(1.0, constants.K)
    if report.min_maturity < -tol or report.max_maturity > constants.K + tol:
        j = int(np.argmax(values > constants.K + tol) if report.max_maturity > constants.K + tol else np.argmax(values < -tol))
        f, i = np.unravel_index(j, values.shape)
        report.passed = False
        report.offending = {"kind": "maturity", "follicle": int(f) + 1, "t": float(trajectory.times[i]), "M_f": float(values[f, i])}

    rng = np.random.default_rng(seed)
    per_follicle = -(-samples // p.n)
    for f in range(p.n):
        t = rng.uniform(handle.anchors[0].t_anchor, handle.horizon, per_follicle)
        x, y = rng.uniform(0, 1, per_follicle), rng.uniform(0, 1, per_follicle)
        phase = rng.integers(1, 4, per_follicle)
        cycle = rng.integers(1, p.N + 1, per_follicle)
        dens = handle.evaluate_many(f, phase, cycle, t, x, y)
        bound = report.density_bounds[f]
        if np.any(dens < 0):
            i = int(np.argmin(dens))
            report.passed = False
            report.offending = report.offending or {"kind": "negative density", "follicle": f + 1, "t": float(t[i]), "x": float(x[i]), "y": float(y[i]), "value": float(dens[i])}
        if bound > 0:
            report.max_density_ratio = max(report.max_density_ratio, float(np.max(dens)) / bound)
        if np.any(dens > bound * (1 + 1e-12)):
            i = int(np.argmax(dens - bound))
            report.passed = False
            report.offending = report.offending or {"kind": "density", "follicle": f + 1, "phase": int(phase[i]), "cycle": int(cycle[i]), "t": float(t[i]), "x": float(x[i]), "y": float(y[i]), "value": float(dens[i]), "bound": bound}
    if not report.passed and raise_on_failure:
        raise BoundViolation("a-priori bound violated", **report.offending)
    return report
