"""Protein secondary-structure (Q8) prediction with a small numpy autodiff engine.

The engine lives in :mod:`pssp.autodiff` and :mod:`pssp.ops`; networks are
assembled in :mod:`pssp.netgraph`, trained by :mod:`pssp.optim` and decoded
by :mod:`pssp.decode`.
"""
from .autodiff import RngStream, Tensor, backward
from .errors import PSSPError
from .netgraph import ArchitectureConfig, Model, build_model, preset

__all__ = ["ArchitectureConfig", "Model", "PSSPError", "RngStream", "Tensor", "backward", "build_model", "preset"]
__version__ = "0.1.0"
