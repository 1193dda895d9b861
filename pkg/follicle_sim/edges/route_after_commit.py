import logging

from follicle_sim.state import MarchState

logger = logging.getLogger(__name__)


def route_after_commit(state: MarchState) -> str:
    """Route logic after a window is committed"""
    if state.get("done", False):
        logger.info("---DECISION: HORIZON REACHED---")
        return "done"
    return "continue"
