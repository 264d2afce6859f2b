from .tensor import Tensor, Tape, custom_gradient
from . import ops, optim, checkpoint

__all__ = ["Tensor", "Tape", "custom_gradient", "ops", "optim", "checkpoint"]
