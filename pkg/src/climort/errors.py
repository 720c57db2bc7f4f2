"""Exception hierarchy shared across the package."""


class ClimortError(Exception):
    """Base class for all package errors."""


class ValidationError(ClimortError):
    """Invalid inputs: malformed files, out-of-range values, bad configuration."""


class ImputationError(ValidationError):
    """A missing value has no observed donor values in its (station, variable, month) stratum."""


class NumericalError(ClimortError):
    """A numerical procedure failed: factorization, constraint projection, or non-convergence."""
