"""Exception hierarchy shared by all solver modules."""


class StochapError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(StochapError, ValueError):
    """Invalid parameter or configuration value.

    ``key`` carries the dotted config path when the error comes from a
    parsed configuration file.
    """

    def __init__(self, message, key=None):
        self.key = key
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)


class DimensionError(StochapError, ValueError):
    """Array shape does not match the grid or quadrature."""


class AlignmentError(StochapError, ValueError):
    """Field lives on the wrong node family (primal vs dual) for an operator."""


class PreconditionError(StochapError, ValueError):
    """Input violates a documented precondition (e.g. nonzero mean)."""


class NumericalError(StochapError, ArithmeticError):
    """A linear solve or factorization failed."""


class BlowUpError(NumericalError):
    """State became non-finite or exceeded the blow-up threshold."""

    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class EnsembleError(StochapError, RuntimeError):
    """Every realization of an ensemble failed."""
