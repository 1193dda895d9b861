import logging

from follicle_sim.state import MarchState

logger = logging.getLogger(__name__)


def route_after_check(state: MarchState) -> str:
    """Commit an accepted window, otherwise plan it again with the shorter length."""
    if state.get("accepted", False):
        return "commit"
    logger.info("---DECISION: WINDOW REJECTED, REPLANNING---")
    return "shrink"
