"""Exception hierarchy shared by the library and the CLI."""

from typing import Optional


class ConsensusDetectError(Exception):
    """Base class for every error raised by consdetect."""

    exit_code = 1


class DomainError(ConsensusDetectError, ValueError):
    """An argument lies outside the domain of the operation."""


class NumericError(ConsensusDetectError, ArithmeticError):
    """A factorization or conditioning check failed."""

    exit_code = 3


class EdgeCountUnreachableError(NumericError):
    """Bisection on the geometric radius could not hit the requested edge count."""

    def __init__(self, msg: str, closest_radius: float, closest_m: int) -> None:
        super().__init__(msg)
        self.closest_radius = closest_radius
        self.closest_m = closest_m


class UnsupportedModelError(ConsensusDetectError):
    """The operation is only defined for spatially uncorrelated (diagonal) noise."""


class ConfigError(ConsensusDetectError):
    """An experiment, sweep or theory configuration is unusable."""

    exit_code = 2


class InsufficientDataError(ConsensusDetectError):
    """Too few usable checkpoints to fit a decay rate."""

    def __init__(self, msg: str, usable: Optional[int] = None) -> None:
        super().__init__(msg)
        self.usable = usable
