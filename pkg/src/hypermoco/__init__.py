"""Retrospective rigid-motion correction for multi-shot 2D MRI.

Simulation of motion-corrupted multi-coil acquisitions, classical and
motion-conditioned neural reconstruction, test-time motion estimation by
data-consistency descent, and evaluation tooling.
"""

__version__ = "0.1.0"

from .exceptions import (  # noqa: E402
    CalibrationError,
    ConfigurationError,
    DimensionError,
    DivergenceError,
    FormatError,
    HyperMoCoError,
    OptimizationError,
    ParameterError,
    SolverError,
)
from .forward import MotionParams, ShotPattern, adjoint, apply_rigid_motion, forward  # noqa: E402

__all__ = [
    "__version__",
    "CalibrationError",
    "ConfigurationError",
    "DimensionError",
    "DivergenceError",
    "FormatError",
    "HyperMoCoError",
    "OptimizationError",
    "ParameterError",
    "SolverError",
    "MotionParams",
    "ShotPattern",
    "adjoint",
    "apply_rigid_motion",
    "forward",
]
