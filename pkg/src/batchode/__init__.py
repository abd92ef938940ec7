"""Batched stiff ODE integration for operator-split reacting-flow chemistry."""
from ._accel import backend_name
from .core import IntegratorStats, ToleranceSpec, VectorPool, compute_weights, wrms_norm
from .integrators import SolverChoice, integrate_bdf, integrate_erk
from .layout import CellBlock, Layout, reorder
from .models import get_model

__version__ = "0.1.0"

__all__ = [
    "backend_name", "IntegratorStats", "ToleranceSpec", "VectorPool", "compute_weights", "wrms_norm",
    "SolverChoice", "integrate_bdf", "integrate_erk", "CellBlock", "Layout", "reorder", "get_model",
]
