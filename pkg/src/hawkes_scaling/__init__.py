"""Hawkes processes, their Riccati-Volterra analytics and scaling limits."""
from .grid import GridFunction
from .matlin import NumericalGuardError

__all__ = ["GridFunction", "NumericalGuardError"]
__version__ = "0.1.0"
