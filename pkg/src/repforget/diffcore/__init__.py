"""Numeric substrate: tensors, reverse-mode autodiff, optimizers, seeded streams."""
from . import tensor as ops
from .gradcheck import finite_diff_check
from .optim import SGD, AdamW, Optimizer, OptimizerState, make_optimizer
from .rng import stream
from .tensor import GraphError, NonFiniteError, ShapeError, Tensor, backward, no_grad

__all__ = [
    "AdamW", "GraphError", "NonFiniteError", "Optimizer", "OptimizerState", "SGD", "ShapeError",
    "Tensor", "backward", "finite_diff_check", "make_optimizer", "no_grad", "ops", "stream",
]
