"""Kinetic flocking on the 1D torus: PDE solver, particle system and checks."""

from .errors import ConfigError, ConvergenceError, MemoryBudgetError, NumericalError
from .model import HerdingFunction, InteractionKernel, ModelParams

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ConvergenceError",
    "HerdingFunction",
    "InteractionKernel",
    "MemoryBudgetError",
    "ModelParams",
    "NumericalError",
    "__version__",
]
