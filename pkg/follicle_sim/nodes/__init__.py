from .window import check_contraction, commit_window, plan_window, solve_window

__all__ = ["plan_window", "solve_window", "check_contraction", "commit_window"]
