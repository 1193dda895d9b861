import pytest
from unittest.mock import patch, MagicMock

import numpy as np

from follicle_sim.characteristics import MaturityTrajectory
from follicle_sim.config import SolverSettings, TestHooks
from follicle_sim.edges import route_after_check, route_after_commit
from follicle_sim.errors import NoConvergence
from follicle_sim.graph import create_march_workflow, create_verify_workflow
from follicle_sim.nodes.window import MAX_HALVINGS


def test_workflow_creation():
    """Test that both workflows can be created and compiled."""
    assert create_march_workflow() is not None
    assert create_verify_workflow() is not None


def test_route_after_check():
    """Accepted windows are committed, rejected ones replanned."""
    assert route_after_check({"accepted": True}) == "commit"
    assert route_after_check({"accepted": False}) == "shrink"
    assert route_after_check({}) == "shrink"


def test_route_after_commit():
    assert route_after_commit({"done": True}) == "done"
    assert route_after_commit({"done": False}) == "continue"


def test_plan_window(params):
    """Test that the planner lays out the window and its control grid."""
    from follicle_sim.nodes.window import plan_window

    state = {
        "params": params,
        "settings": SolverSettings(threads=1),
        "hooks": TestHooks(),
        "frozen": None,
        "constants": MagicMock(delta=0.08),
        "t_current": 0.0,
        "delta": 0.08,
        "horizon": params.T,
        "anchors": [],
        "trajectory": None,
        "step": 1e-3,
        "plan": None,
    }

    result = plan_window(state)

    problem = result["problem"]
    assert problem.t_lo == 0.0
    assert problem.t_hi == pytest.approx(params.T)
    assert problem.times.size == 6


@patch('follicle_sim.nodes.window.picard_solve')
def test_solve_window(mock_picard):
    """Test that the solver stores the candidate and freezes the first plan."""
    from follicle_sim.nodes.window import solve_window

    candidate = MagicMock()
    report = MagicMock()
    mock_picard.return_value = (candidate, report)
    problem = MagicMock()
    problem.plan = "frozen plan"

    result = solve_window({"problem": problem, "constants": MagicMock(), "plan": None})

    assert result["candidate"] is candidate
    assert result["report"] is report
    assert result["plan"] == "frozen plan"
    mock_picard.assert_called_once()


@patch('follicle_sim.nodes.window.sampled_contraction')
def test_check_contraction_shrinks_window(mock_sampled):
    """A sampled ratio above one half rejects the window and halves delta."""
    from follicle_sim.nodes.window import check_contraction

    mock_sampled.return_value = MagicMock(max_ratio=0.8)
    state = {
        "settings": SolverSettings(threads=1),
        "report": MagicMock(observed_ratio=0.1),
        "problem": MagicMock(),
        "constants": MagicMock(),
        "rng": np.random.default_rng(0),
        "halvings": 0,
        "delta": 0.1,
    }

    result = check_contraction(state)

    assert result["accepted"] is False
    assert result["delta"] == pytest.approx(0.05)
    assert result["halvings"] == 1


@patch('follicle_sim.nodes.window.sampled_contraction')
def test_check_contraction_gives_up(mock_sampled):
    from follicle_sim.nodes.window import check_contraction

    mock_sampled.return_value = MagicMock(max_ratio=0.9)
    state = {
        "settings": SolverSettings(threads=1),
        "report": MagicMock(observed_ratio=0.9),
        "problem": MagicMock(),
        "constants": MagicMock(),
        "rng": np.random.default_rng(0),
        "halvings": MAX_HALVINGS,
        "delta": 1e-6,
    }

    with pytest.raises(NoConvergence):
        check_contraction(state)


def test_commit_window_reaches_horizon():
    """Test that committing the last window marks the march done."""
    from follicle_sim.nodes.window import commit_window

    times = np.linspace(0.0, 0.01, 3)
    problem = MagicMock(t_lo=0.0, t_hi=0.01)
    report = MagicMock(iterations=4)
    report.to_dict.return_value = {"iterations": 4}
    contraction = MagicMock()
    contraction.to_dict.return_value = {"max_ratio": 0.1}
    state = {
        "problem": problem,
        "candidate": MaturityTrajectory.constant(times, [1.0, 2.0]),
        "trajectory": None,
        "composed": 0,
        "horizon": 0.01,
        "settings": SolverSettings(threads=1),
        "anchors": [],
        "reanchor_times": [],
        "delta": 0.01,
        "report": report,
        "contraction": contraction,
        "windows": [],
    }

    result = commit_window(state)

    assert result["done"] is True
    assert result["t_current"] == 0.01
    assert result["trajectory"].t_hi == 0.01
    assert len(result["windows"]) == 1
    assert result["windows"][0]["report"] == {"iterations": 4}
    assert result["windows"][0]["reanchored"] is False


def test_verify_report_aggregates():
    """Test that the report node lists failed properties."""
    from follicle_sim.nodes.verify import report

    march = MagicMock()
    march.constants.to_dict.return_value = {"K": 1.0}
    state = {
        "march": march,
        "results": [
            {"name": "bounds", "passed": True, "details": {}},
            {"name": "jacobian", "passed": False, "details": {"worst": 0.01}},
        ],
    }

    result = report(state)

    assert result["passed"] is False
    assert result["report"]["failed"] == ["jacobian"]
    assert result["report"]["properties"]["jacobian"]["worst"] == 0.01


def test_linearity_skipped_without_frozen_controls():
    from follicle_sim.nodes.verify import linearity

    result = linearity({"frozen": None, "results": []})

    assert result["results"][0]["passed"] is True
    assert "skipped" in result["results"][0]["details"]
