"""Exception types shared across the package."""


class FlarsError(Exception):
    """Base class for all package-specific errors."""


class SingularMatrixError(FlarsError):
    """A penalized cross-product matrix could not be factorized."""


class DegenerateResponseError(FlarsError):
    """The response has zero variance, so correlations are undefined."""


class NoSignalError(FlarsError):
    """Every candidate has zero correlation with the response."""


class IllPosedError(FlarsError):
    """A tuning-parameter search has no admissible candidate."""


class OptimizationFailedError(FlarsError):
    """Hyperparameter optimization failed after all restarts."""


class DataFormatError(FlarsError):
    """An input file violates the documented schema."""
