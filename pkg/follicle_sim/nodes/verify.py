import logging
from typing import Any, Dict

import numpy as np

from follicle_sim import fv_oracle
from follicle_sim import model as mdl
from follicle_sim.characteristics import Face, FACE_NAMES, finite_difference_jacobian, jacobian_factor
from follicle_sim.config import TestHooks
from follicle_sim.errors import DegenerateVelocity
from follicle_sim.fixedpoint import WindowProblem, march, picard_solve, sampled_contraction, window_times
from follicle_sim.initial_data import BumpDensity, InitialData
from follicle_sim.quadrature import QuadraturePlan
from follicle_sim.solution import SolutionHandle, TestFunction, check_bounds, trace_mismatch, weak_form_terms
from follicle_sim.state import PropertyResult, VerifyState

logger = logging.getLogger(__name__)

JACOBIAN_RTOL = 1e-6
WEAK_RTOL = 1e-5
TRACE_TOL = 1e-8
PHASE2_TOL = 1e-12
LINEARITY_TOL = 1e-12
MASS_DRIFT_TOL = 1e-10
DOUBLING_RTOL = 1e-12
MIN_SEGMENT = 1e-4
WEAK_QUADRATURE = QuadraturePlan(order=10, strips=2)


def _rng(state: VerifyState, salt: int) -> np.random.Generator:
    return np.random.default_rng([state["run"].seed, salt])


def _record(state: VerifyState, name: str, passed: bool, **details: Any) -> VerifyState:
    result = PropertyResult(name=name, passed=bool(passed), details=details)
    state["results"] = state["results"] + [result]
    if passed:
        logger.info("🧪 %s: ✅ PASSED", name)
    else:
        logger.warning("🧪 %s: ❌ FAILED %s", name, details)
    return state


def _solved_span(state: VerifyState):
    """Start of the solution and the end of its first anchor's span."""
    result = state["march"]
    t0 = result.handle.anchors[0].t_anchor
    end = result.reanchor_times[0] if result.reanchor_times else result.handle.horizon
    return t0, end


def _first_window(state: VerifyState) -> WindowProblem:
    run = state["run"]
    result = state["march"]
    constants = result.constants
    p = run.params
    t0 = state["initial"].t_anchor
    t1 = min(t0 + constants.delta, p.T)
    times = window_times(t0, t1, min(run.solver.control_spacing(constants.delta), t1 - t0))
    return WindowProblem(
        params=p,
        anchors=[state["initial"]],
        times=times,
        settings=run.solver,
        hooks=run.hooks,
        frozen=state["frozen"],
        step=run.solver.integrator_step(constants.delta, p.T),
        plan=result.handle.plan,
    )


def solve(state: VerifyState) -> VerifyState:
    """
    Marches the configured problem once; every property reads this solution.

    Args:
        state (VerifyState): state holding the run config and initial data.

    Returns:
        VerifyState: state with ``march`` populated.
    """
    run = state["run"]
    logger.info("🪟 solving the configured problem for the property suite")
    state["march"] = march(state["initial"], run.params, run.solver, run.hooks, state["frozen"])
    return state


def contraction(state: VerifyState) -> VerifyState:
    """G shrinks distances by at least 1/2 on the first window and maps the K-ball into itself."""
    problem = _first_window(state)
    constants = state["march"].constants
    sample = sampled_contraction(problem, constants, state["run"].verify.contraction_pairs, _rng(state, 1))
    return _record(state, "contraction", sample.max_ratio <= 0.5 and sample.self_map, **sample.to_dict())


def fixed_point(state: VerifyState) -> VerifyState:
    """Picard from two distinct starting levels lands on the same trajectory."""
    constants = state["march"].constants
    n = state["run"].params.n
    low_problem = _first_window(state)
    low, low_report = picard_solve(low_problem, constants, low_problem.constant_guess(np.zeros(n)))
    high_problem = _first_window(state)
    high, high_report = picard_solve(high_problem, constants, high_problem.constant_guess(np.full(n, constants.K)))
    gap = low.sup_distance(high)
    return _record(
        state,
        "fixed_point",
        gap < 1e-9,
        gap=gap,
        iterations=[low_report.iterations, high_report.iterations],
        residuals=[low_report.final_residual, high_report.final_residual],
    )


def jacobian(state: VerifyState) -> VerifyState:
    """Analytic face Jacobians agree with finite differences of the forward flow map."""
    run = state["run"]
    handle = state["march"].handle
    controls = handle.controls
    p = run.params
    rng = _rng(state, 2)
    t0, t_end = handle.anchors[0].t_anchor, handle.horizon
    wanted = run.verify.jacobian_segments
    worst, checked, degenerate = 0.0, 0, 0
    faces: Dict[str, int] = {}
    attempts = 0
    while checked < wanted and attempts < 50 * wanted:
        attempts += 1
        f = int(rng.integers(p.n))
        chain = handle.chain(f, int(rng.integers(1, 4)), int(rng.integers(1, p.N + 1)), float(rng.uniform(t0, t_end)), float(rng.uniform()), float(rng.uniform()))
        for segment in chain.segments:
            if checked >= wanted or segment.start[0] - segment.entry[0] < MIN_SEGMENT:
                continue
            if segment.entry_face != Face.ENDPOINT and segment.entry[0] - controls.t_lo < MIN_SEGMENT:
                continue
            try:
                analytic = jacobian_factor(segment, controls)
            except DegenerateVelocity:
                degenerate += 1
                continue
            numeric = finite_difference_jacobian(segment, controls)
            worst = max(worst, abs(analytic - numeric) / max(abs(numeric), 1e-300))
            name = FACE_NAMES[segment.entry_face]
            faces[name] = faces.get(name, 0) + 1
            checked += 1
    return _record(state, "jacobian", checked > 0 and worst < JACOBIAN_RTOL, max_relative_error=worst, segments=checked, degenerate=degenerate, faces=faces)


def weak_residual(state: VerifyState) -> VerifyState:
    """Random admissible test functions see a vanishing residual; a 1% perturbation does not."""
    run = state["run"]
    handle = state["march"].handle
    initial = state["initial"]
    _, tau = _solved_span(state)
    rng = _rng(state, 3)
    tests = [TestFunction.random(run.params, tau, rng) for _ in range(run.verify.weak_test_functions)]
    terms = [weak_form_terms(handle, test, tau, WEAK_QUADRATURE, time_strips=1) for test in tests]
    residuals = [t.residual for t in terms]
    scales = [t.scale for t in terms]
    passed = all(r <= WEAK_RTOL * s + 1e-14 for r, s in zip(residuals, scales))
    details: Dict[str, Any] = {"tau": tau, "residuals": residuals, "scales": scales}

    if initial.is_zero:
        details["perturbation"] = "not applicable for zero data"
    else:
        key = max(initial.components, key=lambda k: initial.components[k].sup_norm())
        perturbed = handle.perturbed(key, 1.01)
        inflated = [weak_form_terms(perturbed, test, tau, WEAK_QUADRATURE, time_strips=1).residual for test in tests]
        details["perturbed_component"] = list(key)
        details["perturbed_residuals"] = inflated
        passed = passed and max(inflated) >= 10 * max(residuals)
    return _record(state, "weak_residual", passed, **details)


def bounds(state: VerifyState) -> VerifyState:
    result = state["march"]
    report = check_bounds(result.handle, result.trajectory, result.constants, state["run"].verify.bound_samples, seed=state["run"].seed, raise_on_failure=False)
    return _record(state, "bounds", report.passed, **report.to_dict())


def trace_compatibility(state: VerifyState) -> VerifyState:
    handle = state["march"].handle
    rng = _rng(state, 4)
    count = state["run"].verify.trace_samples
    t0 = handle.anchors[0].t_anchor
    times = np.sort(rng.uniform(t0, handle.horizon, count))
    mismatch = trace_mismatch(handle, times, rng.uniform(0.0, 1.0, count))
    return _record(state, "trace_compatibility", mismatch <= TRACE_TOL, max_relative_mismatch=mismatch)


def phase2_exactness(state: VerifyState) -> VerifyState:
    """Late-proliferation densities right of the entry front are translated data."""
    p = state["run"].params
    handle = state["march"].handle
    initial = handle.anchors[0]
    t0, end = _solved_span(state)
    rng = _rng(state, 5)
    worst = 0.0
    count = state["run"].verify.trace_samples
    for f in range(p.n):
        speed = mdl.velocity_ghat(f, p)
        for k in range(1, p.N + 1):
            datum = initial.component(f, 2, k)
            t = rng.uniform(t0, end, count)
            shift = speed * (t - t0)
            x = shift + rng.uniform(0.0, 1.0, count) * np.maximum(1.0 - shift, 0.0)
            y = rng.uniform(0.0, 1.0, count)
            keep = x <= 1.0
            exact = datum(x[keep] - shift[keep], y[keep])
            got = handle.evaluate(f, 2, k, t[keep], x[keep], y[keep])
            if exact.size:
                worst = max(worst, float(np.max(np.abs(got - exact))) / max(1.0, datum.sup_norm()))
    return _record(state, "phase2_exactness", worst <= PHASE2_TOL, max_error=worst)


def maturity_consistency(state: VerifyState) -> VerifyState:
    """The committed trajectory equals the maturity of the solution it generates."""
    result = state["march"]
    trajectory = result.trajectory
    keep = ~np.isin(trajectory.times, result.reanchor_times)
    times = trajectory.times[keep]
    recomputed = result.handle.maturities(times)
    gap = float(np.max(np.abs(recomputed - trajectory.values[:, keep]))) if times.size else 0.0
    tol = 1e-9 * max(1.0, result.constants.K)
    return _record(state, "maturity_consistency", gap <= tol, max_gap=gap, tolerance=tol, samples=int(times.size))


def continuity(state: VerifyState) -> VerifyState:
    """Smoke test: the L1 change over a short time step is small relative to the solution."""
    run = state["run"]
    handle = state["march"].handle
    t0, end = _solved_span(state)
    res = run.output_resolution
    t = 0.5 * (t0 + end)
    eps = 1e-3 * (end - t0)
    change = handle.l1_distance(t, t + eps, res)
    size = float(sum(np.sum(np.abs(v)) for v in handle.sample_grid(t, res).values()) / res**2)
    joints = [w["report"]["joint_mismatch"] for w in state["march"].windows if not w["report"]["joint_reanchored"]]
    return _record(state, "continuity", change <= 0.05 * size + 1e-12, t=t, eps=eps, l1_change=change, l1_norm=size, max_joint_mismatch=max(joints, default=0.0))


def linearity(state: VerifyState) -> VerifyState:
    """With frozen controls the solution is linear in its data."""
    frozen = state["frozen"]
    if frozen is None:
        return _record(state, "linearity", True, skipped="controls are not frozen")
    run = state["run"]
    p = run.params
    rng = _rng(state, 6)
    first = state["initial"]
    second = InitialData(
        p,
        {key: BumpDensity(rng.uniform(0.5, 1.5), rng.uniform(0.3, 0.7, 2), rng.uniform(0.1, 0.3, 2)) for key in first.keys() if rng.uniform() < 0.5},
        first.t_anchor,
    )
    alpha, beta = rng.uniform(0.5, 2.0, 2)
    base = state["march"].handle

    def handle_for(data: InitialData) -> SolutionHandle:
        return SolutionHandle(p, base.controls, [data], base.plan, base.threads, base.chunk_size)

    mixed = handle_for(first.combine(alpha, second, beta))
    one, two = handle_for(first), handle_for(second)
    count = run.verify.trace_samples
    worst = 0.0
    for f in range(p.n):
        phase = rng.integers(1, 4, count)
        cycle = rng.integers(1, p.N + 1, count)
        t = rng.uniform(first.t_anchor, base.horizon, count)
        x, y = rng.uniform(0, 1, count), rng.uniform(0, 1, count)
        expected = alpha * one.evaluate_many(f, phase, cycle, t, x, y) + beta * two.evaluate_many(f, phase, cycle, t, x, y)
        got = mixed.evaluate_many(f, phase, cycle, t, x, y)
        worst = max(worst, float(np.max(np.abs(got - expected) / np.maximum(1.0, np.abs(expected)))))
    return _record(state, "linearity", worst <= LINEARITY_TOL, alpha=alpha, beta=beta, max_error=worst)


def _fv_run(state: VerifyState, hooks: TestHooks) -> fv_oracle.FVRun:
    run = state["run"]
    return fv_oracle.run(run.params.T, state["initial"], run.params, run.verify.fv_resolution, hooks, state["frozen"], keep_ledgers=True, max_steps=run.verify.fv_steps)


def mass_audit(state: VerifyState) -> VerifyState:
    """Without losses or doubling the closed domain keeps its total mass."""
    hooks = TestHooks(zero_loss=True, disable_mitosis=True, closed_domain=True)
    result = _fv_run(state, hooks)
    totals = result.masses.sum(axis=0)
    drift = np.abs(np.diff(totals)) / np.maximum(1.0, np.abs(totals[:-1]))
    worst = float(np.max(drift)) if drift.size else 0.0
    return _record(state, "mass_audit", worst < MASS_DRIFT_TOL, max_drift_per_step=worst, steps=int(drift.size))


def doubling_audit(state: VerifyState) -> VerifyState:
    """Mass entering cycle k is exactly twice the mass leaving late proliferation of cycle k - 1."""
    if state["run"].params.N < 2:
        return _record(state, "doubling_audit", True, skipped="a single cycle has no mitosis face")
    result = _fv_run(state, TestHooks(zero_loss=True))
    worst = 0.0
    for ledger in result.ledgers:
        incoming = ledger.mitosis_in[:, 1:]
        outgoing = 2.0 * ledger.late_out[:, :-1]
        gap = np.abs(incoming - outgoing)
        scale = np.maximum(np.abs(outgoing), 1e-300)
        worst = max(worst, float(np.max(np.where(gap > 0, gap / scale, 0.0))))
    return _record(state, "doubling_audit", worst <= DOUBLING_RTOL, max_relative_error=worst, steps=len(result.ledgers))


def report(state: VerifyState) -> VerifyState:
    """
    Aggregates the property results into the JSON-ready verify report.

    Args:
        state (VerifyState): state with one ``PropertyResult`` per property.

    Returns:
        VerifyState: state with ``passed`` and ``report`` set.
    """
    results = state["results"]
    failed = [r["name"] for r in results if not r["passed"]]
    state["passed"] = not failed
    state["report"] = {
        "passed": state["passed"],
        "failed": failed,
        "properties": {r["name"]: {"passed": r["passed"], **r["details"]} for r in results},
        "constants": state["march"].constants.to_dict(),
    }
    if failed:
        logger.warning("❌ VERIFY: %d of %d properties failed: %s", len(failed), len(results), ", ".join(failed))
    else:
        logger.info("🎉 VERIFY: all %d properties passed", len(results))
    return state


PROPERTY_NODES = [
    ("contraction", contraction),
    ("fixed_point", fixed_point),
    ("jacobian", jacobian),
    ("weak_residual", weak_residual),
    ("bounds", bounds),
    ("trace_compatibility", trace_compatibility),
    ("phase2_exactness", phase2_exactness),
    ("maturity_consistency", maturity_consistency),
    ("continuity", continuity),
    ("linearity", linearity),
    ("mass_audit", mass_audit),
    ("doubling_audit", doubling_audit),
]
