from langgraph.graph import END, StateGraph

from .edges import route_after_check, route_after_commit
from .nodes import check_contraction, commit_window, plan_window, solve_window
from .nodes.verify import PROPERTY_NODES, report, solve
from .state import MarchState, VerifyState


def create_march_workflow():
    """
    Build and compile the window-marching workflow.
    A window is planned, solved by Picard iteration and checked for contraction;
    rejected windows go back to planning with half the length.
    """
    workflow = StateGraph(MarchState)

    workflow.add_node("plan_window", plan_window)
    workflow.add_node("solve_window", solve_window)
    workflow.add_node("check_contraction", check_contraction)
    workflow.add_node("commit_window", commit_window)

    workflow.set_entry_point("plan_window")

    workflow.add_edge("plan_window", "solve_window")
    workflow.add_edge("solve_window", "check_contraction")

    workflow.add_conditional_edges(
        "check_contraction",
        route_after_check,
        {
            "shrink": "plan_window",
            "commit": "commit_window",
        },
    )

    # Loop until the horizon is reached
    workflow.add_conditional_edges(
        "commit_window",
        route_after_commit,
        {
            "continue": "plan_window",
            "done": END,
        },
    )

    return workflow.compile()


def create_verify_workflow():
    """
    Build and compile the property-suite workflow: one solve, then every
    property node in turn, then the report.
    """
    workflow = StateGraph(VerifyState)

    workflow.add_node("solve", solve)
    for name, node in PROPERTY_NODES:
        workflow.add_node(name, node)
    workflow.add_node("report", report)

    workflow.set_entry_point("solve")

    previous = "solve"
    for name, _ in PROPERTY_NODES:
        workflow.add_edge(previous, name)
        previous = name
    workflow.add_edge(previous, "report")
    workflow.add_edge("report", END)

    return workflow.compile()
