"""Exception types raised across the package."""


class BeamformError(Exception):
    """Base class for all package errors."""


class ShapeError(BeamformError, ValueError):
    """Operands have incompatible dimensions."""


class DomainError(BeamformError, ValueError):
    """An argument lies outside the domain of a function (e.g. log of w <= 0)."""


class PreconditionError(BeamformError, ValueError):
    """A solver was called with an input violating its precondition."""


class SolverError(BeamformError, RuntimeError):
    """An iterative routine failed; ``diagnostics`` carries the details."""

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class NumericError(BeamformError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class StateError(BeamformError, RuntimeError):
    """An object was used in a state that does not allow the operation."""
