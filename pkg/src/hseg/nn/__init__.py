"""Minimal 2D neural-network engine: dilated convolution, batch norm,
activations, dropout, losses, initializers, and Adam — with exact analytic
gradients. Tensors are numpy arrays shaped (N, H, W, C)."""

from . import functional
from .layers import BatchNorm, Conv2D, Dropout, ReLU, Softmax
from .optim import Adam

__all__ = ["functional", "Conv2D", "BatchNorm", "ReLU", "Softmax", "Dropout", "Adam"]
