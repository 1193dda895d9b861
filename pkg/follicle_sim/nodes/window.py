import logging

from follicle_sim.errors import NoConvergence
from follicle_sim.fixedpoint import WindowProblem, picard_solve, sampled_contraction, window_times
from follicle_sim.state import MarchState, WindowRecord

logger = logging.getLogger(__name__)

MAX_HALVINGS = 12
TIME_TOL = 1e-12


def plan_window(state: MarchState) -> MarchState:
    """
    Lays out the next window [t, t + delta] and its control sample grid.

    Args:
        state (MarchState): current marching state.

    Returns:
        MarchState: state with a fresh ``problem``.
    """
    settings = state["settings"]
    t_lo = state["t_current"]
    t_hi = min(t_lo + state["delta"], state["horizon"])
    times = window_times(t_lo, t_hi, min(settings.control_spacing(state["constants"].delta), t_hi - t_lo))
    state["problem"] = WindowProblem(
        params=state["params"],
        anchors=list(state["anchors"]),
        times=times,
        past=state["trajectory"],
        settings=settings,
        hooks=state["hooks"],
        frozen=state["frozen"],
        step=state["step"],
        plan=state["plan"],
    )
    logger.info("🪟 window [%.6g, %.6g] with %d control samples", t_lo, t_hi, times.size)
    return state


def solve_window(state: MarchState) -> MarchState:
    candidate, report = picard_solve(state["problem"], state["constants"])
    state["candidate"] = candidate
    state["report"] = report
    if state["plan"] is None:
        state["plan"] = state["problem"].plan
    return state


def check_contraction(state: MarchState) -> MarchState:
    """Accept the window only if both the Picard ratio and the sampled ratio stay at or below 1/2."""
    settings = state["settings"]
    report = state["report"]
    sample = sampled_contraction(state["problem"], state["constants"], settings.contraction_pairs, state["rng"])
    state["contraction"] = sample
    ratio = max(report.observed_ratio, sample.max_ratio)
    state["accepted"] = ratio <= 0.5
    if not state["accepted"]:
        state["halvings"] += 1
        if state["halvings"] > MAX_HALVINGS:
            raise NoConvergence("window length collapsed while enforcing contraction", report=report, ratio=ratio, delta=state["delta"])
        state["delta"] *= 0.5
        logger.warning("⚠️ contraction ratio %.3f > 0.5, window shrunk to %.6g", ratio, state["delta"])
    return state


def commit_window(state: MarchState) -> MarchState:
    """Append the accepted window and re-anchor once the composition cap is hit."""
    problem = state["problem"]
    candidate = state["candidate"]
    state["trajectory"] = candidate if state["trajectory"] is None else state["trajectory"].joined(candidate)
    state["t_current"] = problem.t_hi
    state["composed"] += 1
    state["done"] = state["t_current"] >= state["horizon"] - TIME_TOL

    reanchored = False
    settings = state["settings"]
    if not state["done"] and state["composed"] >= settings.max_composed_windows:
        handle = problem.handle(candidate)
        state["anchors"] = state["anchors"] + [handle.reanchor(problem.t_hi, settings.resample_resolution)]
        state["reanchor_times"] = state["reanchor_times"] + [problem.t_hi]
        state["composed"] = 0
        reanchored = True

    record = WindowRecord(
        t_lo=problem.t_lo,
        t_hi=problem.t_hi,
        delta=state["delta"],
        report=state["report"].to_dict(),
        contraction=state["contraction"].to_dict(),
        reanchored=reanchored,
    )
    state["windows"] = state["windows"] + [record]
    logger.info("📦 committed window [%.6g, %.6g] (%d iterations)", problem.t_lo, problem.t_hi, state["report"].iterations)
    return state
