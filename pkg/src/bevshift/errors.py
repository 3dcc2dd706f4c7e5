"""Exception hierarchy shared by the model, solvers and harness."""

from __future__ import annotations


class BevShiftError(Exception):
    """Base class for all package errors."""


class ModelDomainError(BevShiftError):
    """A powertrain evaluation left the physically admissible domain."""


class BatteryLimitExceeded(ModelDomainError):
    """Requested battery power exceeds what the battery can deliver."""


class MotorOverspeed(ModelDomainError):
    """Motor speed is above the rated maximum."""


class GearOutOfRange(BevShiftError):
    """A shift would leave the valid gear positions."""


class RoundingUnsound(BevShiftError):
    """The argmax weight of a relaxed solution is numerically zero."""


class QpInfeasible(BevShiftError):
    """The linearized QP subproblem has no feasible point."""


class LineSearchFail(BevShiftError):
    """Backtracking reached the minimum step without merit decrease."""


class CallbackFailure(BevShiftError):
    """A problem callback raised at an iterate the solver had to evaluate."""

    def __init__(self, message: str, iterate=None):
        super().__init__(message)
        self.iterate = iterate


class GridTooCoarse(BevShiftError):
    """No DP control candidate produces a finite successor at some node."""


class LeftGridHull(BevShiftError):
    """Forward DP simulation left the state grid."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class EnvelopeExceeded(BevShiftError):
    """Exact reference following needs torque outside the motor envelope."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class ParseError(BevShiftError):
    """Malformed drive-cycle file."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class EmptyCycle(BevShiftError):
    """Drive-cycle file has no data rows."""


class ConfigError(BevShiftError):
    """Invalid configuration values."""
