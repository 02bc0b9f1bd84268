"""Volumetric segmentation with large-kernel depthwise ConvNets, on a numpy autodiff engine."""

from .model import UXNet, UXNetConfig, build
from .rng import Rng, set_deterministic
from .tensor import Parameter, Tensor, backward, no_grad

__all__ = ["Parameter", "Rng", "Tensor", "UXNet", "UXNetConfig", "backward", "build", "no_grad", "set_deterministic"]
__version__ = "0.1.0"
