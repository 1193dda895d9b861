"""Exception hierarchy for follicle_sim.

Every error raised by the library derives from ``FollicleSimError`` and keeps
the offending context (follicle, time, point) as attributes so the CLI can
report it without parsing messages.
"""

from typing import Any, Optional


class FollicleSimError(Exception):
    """Base class for all library errors."""

    exit_code: int = 1

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.context = context

    def __str__(self) -> str:
        base = super().__str__()
        if not self.context:
            return base
        details = ", ".join(f"{key}={value!r}" for key, value in sorted(self.context.items()))
        return f"{base} ({details})"


class ConfigError(FollicleSimError):
    exit_code = 2


class AssumptionViolated(FollicleSimError):
    """A sign hypothesis of the well-posedness theory fails for a realized control."""

    exit_code = 3


class NonpositiveK2(AssumptionViolated):
    exit_code = 3


class OutOfDomain(FollicleSimError):
    pass


class StepFailure(FollicleSimError):
    pass


class WindowExceeded(FollicleSimError):
    pass


class ChainOverflow(FollicleSimError):
    pass


class DegenerateVelocity(FollicleSimError):
    pass


class QuadratureFailure(FollicleSimError):
    pass


class NoConvergence(FollicleSimError):
    exit_code = 4

    def __init__(self, message: str, report: Optional[Any] = None, **context: Any):
        super().__init__(message, **context)
        self.report = report


class InvalidTestFunction(FollicleSimError):
    pass


class BoundViolation(FollicleSimError):
    exit_code = 5


class CFLViolation(FollicleSimError):
    pass


class NonfiniteState(FollicleSimError):
    pass


def exit_code_for(error: BaseException) -> int:
    """Map a library error to the CLI exit code."""
    if isinstance(error, FollicleSimError):
        return error.exit_code
    return 1
