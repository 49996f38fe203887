"""Minimal reverse-mode autodiff and the layer set for small 3D CNNs."""
from . import functional
from .layers import BatchNorm3d, Conv3d, Dropout, Flatten, Linear, MaxPool3d, Module, ReLU, Sequential
from .optim import AdamState, adam_step
from .tensor import NonFiniteGradientError, Tape, Tensor, backward

__all__ = [
    "AdamState",
    "BatchNorm3d",
    "Conv3d",
    "Dropout",
    "Flatten",
    "Linear",
    "MaxPool3d",
    "Module",
    "NonFiniteGradientError",
    "ReLU",
    "Sequential",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "functional",
]
