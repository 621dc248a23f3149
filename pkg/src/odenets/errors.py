"""Exception types shared across the package."""


class OdenetsError(Exception):
    """Base class for all package errors."""


class ConfigError(OdenetsError, ValueError):
    """Invalid configuration value (quadrature order, solver spec, ...)."""


class DomainError(OdenetsError, ValueError):
    """Input outside the mathematical domain of an operation."""


class ShapeError(OdenetsError, ValueError):
    """Array shapes inconsistent with the owning configuration."""


class SequencingError(OdenetsError, RuntimeError):
    """Operation invoked before a prerequisite table was built."""


class SolverFailure(OdenetsError, RuntimeError):
    """Adaptive integrator exhausted its step budget.

    Carries the last accepted time so callers can diagnose where the
    integration stalled.
    """

    def __init__(self, message, last_time=None):
        super().__init__(message)
        self.last_time = last_time


class DivergenceError(OdenetsError, RuntimeError):
    """Training produced a non-finite loss. Carries the offending step."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NumericError(OdenetsError, RuntimeError):
    """Numerical routine (e.g. eigensolver) failed to converge."""


class DataError(OdenetsError, ValueError):
    """Base class for dataset construction and parsing errors."""


class IdxFormatError(DataError):
    """Malformed IDX stream: bad magic or dimension fields."""


class IdxLengthError(DataError):
    """IDX payload shorter or longer than its header promises."""


class IdxConsistencyError(DataError):
    """Image and label files disagree on the item count."""


class UsageError(OdenetsError, ValueError):
    """Bad command-line or experiment-spec usage."""
