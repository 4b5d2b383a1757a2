"""Exception and warning types shared across the package."""


class SingularSystemError(ValueError):
    """Raised when a linear system is numerically rank deficient."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class DivergenceError(RuntimeError):
    """Raised when iterative training produces non-finite losses."""


class BudgetError(ValueError):
    """Raised when (epsilon, delta) is incompatible with a mechanism."""


class CalibrationError(RuntimeError):
    """Raised when a mechanism constant cannot be computed reliably."""


class SchemaError(ValueError):
    """Raised on malformed CSV/JSON inputs; carries the offending line."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class PrivateAccessError(RuntimeError):
    """Raised when private records are touched during calibration."""


class DegenerateDataWarning(UserWarning):
    """Issued when calibration data has no usable variation."""


class NumericalRankWarning(UserWarning):
    """Issued when a requested subspace rank exceeds the numerical rank."""
