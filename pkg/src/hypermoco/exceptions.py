"""Exception hierarchy shared across the package."""


class HyperMoCoError(Exception):
    """Base class for all package errors."""


class DimensionError(HyperMoCoError, ValueError):
    """Array rank or shape does not match what an operation expects."""


class ParameterError(HyperMoCoError, ValueError):
    """A scalar parameter is outside its valid range."""


class ConfigurationError(HyperMoCoError, ValueError):
    """A combination of settings cannot produce a valid configuration."""


class FormatError(HyperMoCoError, ValueError):
    """On-disk data does not follow the expected container format."""


class CalibrationError(HyperMoCoError, RuntimeError):
    """Autocalibration data is insufficient for kernel fitting."""


class SolverError(HyperMoCoError, RuntimeError):
    """A linear solve failed (singular or ill-posed system)."""


class DivergenceError(HyperMoCoError, RuntimeError):
    """An iterative method produced non-finite values."""


class OptimizationError(HyperMoCoError, RuntimeError):
    """Every optimization trial failed."""
