"""Dual-stream physics-residual forecasting (trend stream + graph residual stream)."""

from .kernels import BACKEND
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["BACKEND", "Tensor", "backward", "no_grad", "__version__"]
