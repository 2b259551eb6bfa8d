"""Temporal audio-visual correlation embedding at desk scale."""

from tavce.tensor import Tensor, backward, no_grad
from tavce.rng import SeededRng

__all__ = ["Tensor", "backward", "no_grad", "SeededRng"]
__version__ = "0.1.0"
