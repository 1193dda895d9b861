"""The maturity map G, its constants, Picard iteration and window marching."""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import model as mdl
from .characteristics import Controls, FrozenControls, MaturityTrajectory
from .config import SolverSettings, TestHooks
from .errors import NoConvergence, NonpositiveK2
from .initial_data import InitialData
from .model import ModelParams
from .quadrature import QuadraturePlan, choose_plan
from .solution import SolutionHandle, density_bound

logger = logging.getLogger(__name__)

JOINT_TOL = 1e-8
TIME_TOL = 1e-12


@dataclass
class ContractionConstants:
    K: float
    K1: float
    K2: float
    delta: float
    C1f: List[float]
    C2f: List[float]
    analytic_window: float
    density_bounds: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "K": self.K,
            "K1": self.K1,
            "K2": self.K2,
            "delta": self.delta,
            "C1f": list(self.C1f),
            "C2f": list(self.C2f),
            "analytic_window": self.analytic_window,
            "density_bounds": list(self.density_bounds),
        }


def maturity_bound(initial: InitialData, params: ModelParams) -> float:
    p = params
    total = 0.0
    for f in range(p.n):
        for k in range(1, p.N + 1):
            total += p.a1 * initial.l1_norm(f, 1, k) + (p.a2 - p.a1) * initial.l1_norm(f, 2, k) + p.a2 * initial.l1_norm(f, 3, k)
    return float(2**p.N * (p.gamma_0 + p.gamma_s) ** 2 * total)


def closure_extrema(params: ModelParams, K: float, grid: int = 64) -> Tuple[float, float]:
    """Largest C1 norm and smallest positive velocity of the closures over the control box.

    The box is y in [0, 1] and M_f, M in [0, K]; the closures carry no explicit
    time dependence, so the time axis drops out. C1 norms are sup|f| plus the
    sum of sup|partial f| with analytic partials.
    """
    p = params
    y = np.linspace(0.0, 1.0, grid)
    levels = np.linspace(0.0, K, grid)
    Y, Mf, M = np.meshgrid(y, levels, levels, indexing="ij")
    U = np.asarray(mdl.global_control_U(M, 0.0, p))
    dU = np.asarray(mdl.dU_dM(M, p))
    b = np.asarray(mdl.local_gain(Mf, p))
    db = np.asarray(mdl.dgain_dMf(Mf, p))
    u = b * U
    u_Mf = db * U
    u_M = b * dU

    def c1(value, *partials) -> float:
        return float(np.max(np.abs(value)) + sum(np.max(np.abs(d)) for d in partials))

    largest = 0.0
    smallest = np.inf
    for f in range(p.n):
        gbar = np.asarray(mdl.velocity_gbar(u, f, p))
        dgbar = np.asarray(mdl.dgbar_du(u, f, p))
        hbar = np.asarray(mdl.velocity_hbar(Y, u, f, p))
        dhbar = np.asarray(mdl.dhbar_du(Y, u, f, p))
        htilde = np.asarray(mdl.velocity_htilde(Y, u, f, p))
        dhtilde = np.asarray(mdl.dhtilde_du(Y, u, f, p))
        norms = [
            mdl.velocity_ghat(f, p),
            mdl.velocity_gtilde(f, p),
            c1(gbar, dgbar * u_Mf, dgbar * u_M),
            c1(hbar, np.asarray(mdl.dhbar_dy(Y, u, f, p)), dhbar * u_Mf, dhbar * u_M),
            c1(htilde, np.asarray(mdl.dhtilde_dy(Y, u, f, p)), dhtilde * u_Mf, dhtilde * u_M),
        ]
        largest = max(largest, *norms)
        smallest = min(smallest, float(np.min(gbar)), float(np.min(hbar)))
    for gamma_of_y, scale in ((p.gamma_s * Y, p.gamma_s), (p.gamma_0 * Y + p.gamma_s, p.gamma_0)):
        loss = np.asarray(mdl.loss_rate(gamma_of_y, U, p))
        d_y = np.asarray(mdl.dloss_dgamma(gamma_of_y, U, p)) * scale
        d_M = np.asarray(mdl.dloss_dU(gamma_of_y, U, p)) * dU
        largest = max(largest, c1(loss, d_y, d_M))
    return largest, smallest


def contraction_coefficients(initial: InitialData, params: ModelParams, K1: float, K2: float, t: float) -> Tuple[List[float], List[float]]:
    p = params
    gm2 = p.gamma_m**2
    denom = 1.0 - t * K1
    C1, C2 = [], []
    for f in range(p.n):
        bar = sum(initial.sup_norm(f, 1, k) for k in range(1, p.N + 1))
        hat = sum(initial.sup_norm(f, 2, k) for k in range(2, p.N + 1))
        tilde = sum(initial.sup_norm(f, 3, k) for k in range(1, p.N + 1))
        c1 = (
            p.a1 * gm2 * (2 * K1**2 - t * K1**2 + 3 * K1 + t * K1**2 * K2 + 9 * K1 * K2) / (K2 * denom) * bar
            + 2 * (p.a2 - p.a1) * gm2 * (K1**2 + 2 * t * K1**2 * K2 + 4 * K1 * K2) / (K2 * denom) * hat
            + p.a2 * gm2 * (2 * K1 + 2 * t * K1**2) / denom * tilde
        )
        c2 = (
            p.a1 * gm2 * (2 * K1**2 + 2 * K1 + 12 * K1 * K2 - 2 * t * K1**2 * K2) / (K2 * denom) * bar
            + 2 * (p.a2 - p.a1) * gm2 * (K1**2 + 6 * K1 * K2) / (K2 * denom) * hat
            + 4 * p.a2 * gm2 * K1 / denom * tilde
        )
        C1.append(float(c1))
        C2.append(float(c2))
    return C1, C2


def compute_constants(initial: InitialData, params: ModelParams, settings: SolverSettings = SolverSettings()) -> ContractionConstants:
    """K, K1, K2, the window length and the contraction coefficients."""
    K = maturity_bound(initial, params)
    largest, smallest = closure_extrema(params, K, settings.constants_grid)
    K1 = settings.k1_inflation * largest
    K2 = settings.k2_deflation * smallest
    if K2 <= 0:
        raise NonpositiveK2("infimum of the age and maturity velocities is not positive", K2=K2)
    delta = settings.window_safety * min(1.0 / (2.0 * K1), params.T)
    C1, C2 = contraction_coefficients(initial, params, K1, K2, delta)
    peak = max(c1 + c2 for c1, c2 in zip(C1, C2))
    analytic = 1.0 / (2 * params.n * peak) if peak > 0 else float("inf")
    constants = ContractionConstants(K=K, K1=K1, K2=K2, delta=delta, C1f=C1, C2f=C2, analytic_window=analytic)
    constants.density_bounds = [density_bound(initial, f, constants, params.T) for f in range(params.n)]
    logger.info("constants K=%.6g K1=%.6g K2=%.6g delta=%.6g", K, K1, K2, delta)
    return constants


# --- the map G on one window -------------------------------------------------


@dataclass
class WindowProblem:
    """Everything G needs on [t_lo, t_hi]: committed past, anchors and knobs."""

    params: ModelParams
    anchors: List[InitialData]
    times: np.ndarray
    past: Optional[MaturityTrajectory] = None
    settings: SolverSettings = field(default_factory=SolverSettings)
    hooks: TestHooks = field(default_factory=TestHooks)
    frozen: Optional[FrozenControls] = None
    step: Optional[float] = None
    plan: Optional[QuadraturePlan] = None

    @property
    def t_lo(self) -> float:
        return float(self.times[0])

    @property
    def t_hi(self) -> float:
        return float(self.times[-1])

    def default_plan(self) -> QuadraturePlan:
        s = self.settings
        return QuadraturePlan(order=s.quad_order, strips=s.quad_strips, rtol=s.quad_rtol, atol=s.quad_atol, max_level=s.quad_max_level)

    def full_trajectory(self, M: MaturityTrajectory) -> MaturityTrajectory:
        return M if self.past is None else self.past.joined(M)

    def handle(self, M: MaturityTrajectory, plan: Optional[QuadraturePlan] = None) -> SolutionHandle:
        controls = Controls(self.params, self.full_trajectory(M), self.hooks, self.frozen, step=self.step)
        return SolutionHandle(self.params, controls, self.anchors, plan or self.plan or self.default_plan(), self.settings.threads, self.settings.chunk_size)

    def pin(self, values: np.ndarray) -> np.ndarray:
        """Overwrite the joint column with the committed value."""
        if self.past is not None:
            values = values.copy()
            values[:, 0] = self.past.values[:, -1]
        return values

    def constant_guess(self, levels) -> MaturityTrajectory:
        M = MaturityTrajectory.constant(self.times, levels)
        return MaturityTrajectory(self.times, self.pin(M.values))

    @property
    def starts_on_anchor(self) -> bool:
        """True when the window opens on a re-anchored (resampled) solution."""
        return self.past is not None and max(a.t_anchor for a in self.anchors) >= self.t_lo - TIME_TOL

    def start_levels(self) -> np.ndarray:
        if self.past is not None:
            return self.past.values[:, -1].copy()
        unforced = self.handle(MaturityTrajectory.constant(self.times, np.zeros(self.params.n)))
        return unforced.maturities([self.t_lo])[:, 0]


def apply_G(M: MaturityTrajectory, problem: WindowProblem, plan: Optional[QuadraturePlan] = None) -> MaturityTrajectory:
    """Construct the densities for frozen M and return their maturities on the window grid."""
    values = problem.handle(M, plan).maturities(problem.times)
    return MaturityTrajectory(problem.times, problem.pin(values))


@dataclass
class FixedPointReport:
    t_lo: float
    t_hi: float
    iterations: int = 0
    residuals: List[float] = field(default_factory=list)
    observed_ratio: float = 0.0
    joint_mismatch: float = 0.0
    joint_reanchored: bool = False
    tolerance: float = 0.0
    quadrature_strips: int = 0
    quadrature_error: float = 0.0
    converged: bool = False

    @property
    def final_residual(self) -> float:
        return self.residuals[-1] if self.residuals else 0.0

    def to_dict(self) -> Dict[str, Any]:
        data = dict(self.__dict__)
        data["final_residual"] = self.final_residual
        return data


def observed_ratio(residuals: Sequence[float], floor: float) -> float:
    """Largest ratio of successive residuals above the noise floor."""
    ratios = [b / a for a, b in zip(residuals[:-1], residuals[1:]) if a > floor and b > floor]
    return max(ratios) if ratios else 0.0


def check_joint(problem: WindowProblem, report: FixedPointReport, constants: ContractionConstants) -> None:
    """The densities at the window start must reproduce the committed maturity.

    A joint on a re-anchored solution carries the resampling error instead,
    so it is reported but not held to ``JOINT_TOL``.
    """
    if problem.past is None:
        return
    report.joint_reanchored = problem.starts_on_anchor
    limit = JOINT_TOL * max(1.0, constants.K)
    if report.joint_reanchored:
        logger.info("window joint at %.6g on a re-anchored solution: mismatch %.3e", problem.t_lo, report.joint_mismatch)
    elif report.joint_mismatch > limit:
        raise NoConvergence("window joint disagrees with the committed maturity", report=report, t=problem.t_lo, mismatch=report.joint_mismatch, limit=limit)


def picard_solve(problem: WindowProblem, constants: ContractionConstants, guess: Optional[MaturityTrajectory] = None) -> Tuple[MaturityTrajectory, FixedPointReport]:
    """Iterate M <- G(M) to the fixed point on the window.

    The quadrature plan is chosen by strip refinement on the first iterate
    and then frozen, so every iteration applies the same discrete map.
    """
    settings = problem.settings
    tol = settings.fp_tol * max(1.0, constants.K)
    report = FixedPointReport(problem.t_lo, problem.t_hi, tolerance=tol)
    M = guess if guess is not None else problem.constant_guess(problem.start_levels())
    M = MaturityTrajectory(problem.times, problem.pin(M.values))

    for iteration in range(1, settings.fp_max_iter + 1):
        if problem.plan is None:
            handle = problem.handle(M)
            plan, values, error = choose_plan(problem.default_plan(), lambda pl: handle.maturities(problem.times, pl))
            problem.plan = plan
            report.quadrature_error = error
        else:
            values = problem.handle(M).maturities(problem.times)
        if problem.past is not None:
            report.joint_mismatch = float(np.max(np.abs(values[:, 0] - problem.past.values[:, -1])))
        new = MaturityTrajectory(problem.times, problem.pin(values))
        residual = new.sup_distance(M)
        report.residuals.append(residual)
        report.iterations = iteration
        logger.info("🔁 Picard %d on [%.6g, %.6g]: residual %.3e", iteration, problem.t_lo, problem.t_hi, residual)
        M = new
        if residual < tol:
            report.converged = True
            break
    report.quadrature_strips = problem.plan.strips
    report.observed_ratio = observed_ratio(report.residuals, 10 * tol)
    if not report.converged:
        raise NoConvergence("Picard iteration hit the iteration cap", report=report, residual=report.final_residual, tolerance=tol)
    check_joint(problem, report, constants)
    logger.info("✅ converged in %d iterations (observed ratio %.3f)", report.iterations, report.observed_ratio)
    return M, report


@dataclass
class ContractionSample:
    pairs: int
    max_ratio: float
    max_image_norm: float
    K: float

    @property
    def self_map(self) -> bool:
        return self.max_image_norm <= self.K * (1 + 1e-12) + 1e-15

    def to_dict(self) -> Dict[str, Any]:
        return {"pairs": self.pairs, "max_ratio": self.max_ratio, "max_image_norm": self.max_image_norm, "K": self.K, "self_map": self.self_map}


def sampled_contraction(problem: WindowProblem, constants: ContractionConstants, pairs: int, rng: np.random.Generator) -> ContractionSample:
    """Ratios ||G(M') - G(M)|| / ||M' - M|| for random pairs in the K-ball."""
    K = constants.K
    sample = ContractionSample(pairs=pairs, max_ratio=0.0, max_image_norm=0.0, K=K)
    if K <= 0 or pairs <= 0:
        return sample
    shape = (problem.params.n, problem.times.size)
    for _ in range(pairs):
        M1 = MaturityTrajectory(problem.times, problem.pin(K * rng.uniform(size=shape)))
        M2 = MaturityTrajectory(problem.times, problem.pin(K * rng.uniform(size=shape)))
        G1 = apply_G(M1, problem)
        G2 = apply_G(M2, problem)
        gap = M1.sup_distance(M2)
        if gap > 0:
            sample.max_ratio = max(sample.max_ratio, G1.sup_distance(G2) / gap)
        sample.max_image_norm = max(sample.max_image_norm, G1.sup_norm(), G2.sup_norm())
    return sample


def window_times(t_lo: float, t_hi: float, spacing: float) -> np.ndarray:
    count = max(1, int(np.ceil((t_hi - t_lo) / spacing - 1e-9)))
    return np.linspace(t_lo, t_hi, count + 1)


# --- global marching ---------------------------------------------------------


@dataclass
class MarchResult:
    handle: SolutionHandle
    trajectory: MaturityTrajectory
    constants: ContractionConstants
    windows: List[Dict[str, Any]]
    reanchor_times: List[float] = field(default_factory=list)

    @property
    def reports(self) -> List[Dict[str, Any]]:
        return [w["report"] for w in self.windows]


def march(
    initial: InitialData,
    params: ModelParams,
    settings: SolverSettings = SolverSettings(),
    hooks: TestHooks = TestHooks(),
    frozen: Optional[FrozenControls] = None,
    constants: Optional[ContractionConstants] = None,
    horizon: Optional[float] = None,
) -> MarchResult:
    """Solve successive windows up to ``horizon`` (default params.T) through the march graph."""
    from .graph import create_march_workflow

    constants = constants or compute_constants(initial, params, settings)
    horizon = params.T if horizon is None else float(horizon)
    app = create_march_workflow()
    expected_windows = int(np.ceil(horizon / constants.delta)) + 1
    state = {
        "params": params,
        "settings": settings,
        "hooks": hooks,
        "frozen": frozen,
        "constants": constants,
        "horizon": horizon,
        "anchors": [initial],
        "trajectory": None,
        "t_current": 0.0,
        "delta": constants.delta,
        "step": settings.integrator_step(constants.delta, params.T),
        "plan": None,
        "composed": 0,
        "halvings": 0,
        "windows": [],
        "reanchor_times": [],
        "rng": np.random.default_rng(settings.seed),
        "done": False,
    }
    final = app.invoke(state, config={"recursion_limit": 8 * expected_windows + 64})
    trajectory = final["trajectory"]
    controls = Controls(params, trajectory, hooks, frozen, step=final["step"])
    handle = SolutionHandle(params, controls, final["anchors"], final["plan"], settings.threads, settings.chunk_size)
    return MarchResult(handle, trajectory, constants, final["windows"], final["reanchor_times"])
