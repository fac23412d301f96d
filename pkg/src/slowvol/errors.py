"""Exception hierarchy used across the package."""

from __future__ import annotations


class SlowvolError(Exception):
    """Base class for package errors."""


class DomainError(SlowvolError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class ValidationError(SlowvolError, ValueError):
    """Invalid model, utility, or configuration parameters.

    ``field`` holds the dotted config path when known.
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class ConvergenceError(SlowvolError, ArithmeticError):
    """An iterative solver exceeded its iteration cap."""


class NumericalDifferentiationError(SlowvolError, ArithmeticError):
    """Finite-difference stencil error estimate exceeded tolerance."""


class RangeError(SlowvolError, ArithmeticError):
    """A target value lies outside the numerically reachable interval."""

    def __init__(self, message: str, interval: tuple[float, float] | None = None):
        self.interval = interval
        super().__init__(message)


class OverflowGuardError(SlowvolError, OverflowError):
    """Exponent argument exceeded the configured cap."""


class ExplosionError(SlowvolError, ArithmeticError):
    """Riccati solution requested at or beyond its explosion time."""

    def __init__(self, message: str, tau_star: float):
        self.tau_star = tau_star
        super().__init__(message)


class SimulationError(SlowvolError, ArithmeticError):
    """Non-finite state encountered during path simulation."""

    def __init__(self, message: str, path_index: int | None = None):
        self.path_index = path_index
        super().__init__(message)
