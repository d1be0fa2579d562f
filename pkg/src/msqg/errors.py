"""Exception types shared across the package.

The CLI maps them onto exit codes: configuration errors exit 2 and numeric errors
exit 3.
"""


class MSQGError(Exception):
    """Base class for package errors."""


class ConfigurationError(MSQGError, ValueError):
    """Inconsistent inputs: shape or lattice mismatch, bad parameters, unknown keys."""


class DataError(MSQGError, ValueError):
    """Input data that cannot be used, e.g. non-finite values."""


class DomainError(MSQGError, ValueError):
    """Mathematically undefined request, e.g. a negative homogeneous norm of a field with mean."""


class NumericError(MSQGError, ArithmeticError):
    """Quadrature non-convergence, NaN in a trajectory, or failed cross-validation.

    ``state`` optionally carries the last good object (for example a solver state).
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class StepRejected(NumericError):
    """A time step failed the CFL check; ``suggested_dt`` would pass it."""

    def __init__(self, message, suggested_dt, state=None):
        super().__init__(message, state)
        self.suggested_dt = suggested_dt


class ParameterRangeWarning(UserWarning):
    """Parameters outside the ranges where the well-posedness theory applies."""
