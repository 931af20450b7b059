"""Closed-form analysis and simulation of two-layer ReLU networks under
multiplicative Gaussian input masks."""
from ._accel import NUMBA_ENABLED

__version__ = "0.1.0"

__all__ = ["NUMBA_ENABLED", "__version__"]
