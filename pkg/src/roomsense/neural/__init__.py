"""Differentiable numeric core and the three regressor families."""

from .tensor import Tensor, no_grad
from .config import TransformerConfig
from .checkpoint import Checkpoint, save_checkpoint, load_checkpoint

__all__ = [
    "Tensor",
    "no_grad",
    "TransformerConfig",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
]
