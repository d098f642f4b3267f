"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Bad caller input: shapes, ranges, non-finite data."""


class ConfigError(ValidationError):
    """Malformed configuration: unknown fields, wrong types, missing values."""


class FormatError(ValidationError):
    """Corrupt or mistyped on-disk artifact (bad magic, truncated payload)."""


class NumericalError(RuntimeError):
    """Numerical failure at runtime: non-convergence or non-finite intermediates."""


class StateError(RuntimeError):
    """Operation invoked in the wrong order (e.g. backward before forward)."""


class PretrainingFailure(RuntimeError):
    """Synthetic pretraining stopped below the minimum accuracy bar."""
