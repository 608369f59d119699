"""float64 tensor engine: autodiff, layers, optimizers, seeded streams."""
from . import functional
from .kernels import BACKEND
from .optim import Adam, AdamW, OptimizerState, optimizer_step
from .rng import Rng
from .tensor import Tensor, as_tensor, is_grad_enabled, no_grad

__all__ = [
    "Adam", "AdamW", "BACKEND", "OptimizerState", "Rng", "Tensor", "as_tensor",
    "functional", "is_grad_enabled", "no_grad", "optimizer_step",
]
