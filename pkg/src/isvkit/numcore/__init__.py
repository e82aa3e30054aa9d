"""Small differentiable numeric kernel built on numpy arrays."""

from .gradcheck import finite_diff_check
from .layers import (
    MFM, Conv2d, Dense, Flatten, Layer, MaxPool2d, ReLU, Sequential, Sigmoid,
    Softmax, activation_apply, softmax,
)
from .optim import AMSGrad, AmsgradState, amsgrad_step

__all__ = [
    "AMSGrad", "AmsgradState", "Conv2d", "Dense", "Flatten", "Layer", "MFM",
    "MaxPool2d", "ReLU", "Sequential", "Sigmoid", "Softmax", "activation_apply",
    "amsgrad_step", "finite_diff_check", "softmax",
]
