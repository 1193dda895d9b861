from .route_after_check import route_after_check
from .route_after_commit import route_after_commit

__all__ = ["route_after_check", "route_after_commit"]
