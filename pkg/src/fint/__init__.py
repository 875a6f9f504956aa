"""FINT click-through-rate engine: field-aware interaction layers, LR/FM baselines,
data preparation, metrics and a training harness with hand-written gradients."""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
