"""Iterative robust MPC that learns unknown polyhedral state constraints."""
from .geometry import Polytope

__version__ = "0.1.0"

__all__ = ["Polytope", "__version__"]
