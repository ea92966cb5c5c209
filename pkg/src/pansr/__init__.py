"""Pixel-attention super-resolution: autograd engine, PAN models, cost audit, training."""
from .nn import PAN, ModelConfig, build_pan, summary
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["PAN", "ModelConfig", "Tensor", "backward", "build_pan", "no_grad", "summary"]
