"""Synthetic sewer time-series generation (WGAN-GP) and peak-flow forecasting."""

from .tensor import Tape, Tensor, backward

__all__ = ["Tape", "Tensor", "backward"]
__version__ = "0.1.0"
