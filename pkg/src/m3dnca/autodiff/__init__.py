"""Minimal reverse-mode autodiff used by the training pipeline."""

from .optim import Adam
from .tensor import Tape, Tensor

__all__ = ["Adam", "Tape", "Tensor"]
