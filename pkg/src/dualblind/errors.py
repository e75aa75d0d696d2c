"""Exception types raised across the package."""


class DualBlindError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(DualBlindError, ValueError):
    """Inconsistent dimensions or out-of-range configuration values."""


class DegenerateModelError(DualBlindError, ArithmeticError):
    """A nonpositive innovation variance (or other singularity) was hit.

    ``pulse`` is the zero-based pulse index where it happened, when known.
    """

    def __init__(self, message, pulse=None, iteration=None):
        super().__init__(message)
        self.pulse = pulse
        self.iteration = iteration


class OversizeOracleError(DualBlindError, ValueError):
    """The dense oracle was asked to build a joint Gaussian that is too large."""


class IllConditionedMStepError(DualBlindError, ArithmeticError):
    """The companion-row normal equations stayed singular after regularization."""


class ConfigError(DualBlindError, ValueError):
    """Bad run configuration; ``path`` names the offending field."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path
