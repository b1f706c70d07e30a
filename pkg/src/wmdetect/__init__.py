"""Parsimonious watermarking with Bayesian quickest attack detection."""

from .linalg import SolverError, StabilityError, SystemModel, solve_dare, solve_dlyap, spectral_radius
from .plant import AttackModel, WatermarkConfig
from .fixtures import load_fixture

__all__ = [
    "AttackModel",
    "SolverError",
    "StabilityError",
    "SystemModel",
    "WatermarkConfig",
    "load_fixture",
    "solve_dare",
    "solve_dlyap",
    "spectral_radius",
]

__version__ = "0.1.0"
