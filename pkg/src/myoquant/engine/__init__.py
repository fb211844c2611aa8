"""Minimal reverse-mode differentiation engine (NHWC, numpy-backed)."""

from . import ops
from .layers import BatchNorm, Conv2D, ConvTranspose2D, Dense, Layer
from .losses import LossWeights, combined_loss
from .optim import AdamState, NumericalError, adam_step
from .tensor import Parameter, Tape, Tensor

__all__ = [
    "AdamState", "BatchNorm", "Conv2D", "ConvTranspose2D", "Dense", "Layer", "LossWeights",
    "NumericalError", "Parameter", "Tape", "Tensor", "adam_step", "combined_loss", "ops",
]
