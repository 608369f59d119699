"""Adam / AdamW with explicit, inspectable state."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decoupled: bool = False
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def optimizer_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                   state: OptimizerState) -> None:
    """One bias-corrected adaptive-moment update, in place on ``params``.

    Coupled decay adds ``weight_decay * p`` to the gradient (Adam); decoupled
    decay shrinks the parameter by ``lr * weight_decay * p`` outside the
    adaptive step (AdamW).
    """
    if len(params) != len(grads):
        raise ContractError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ContractError(f"optimizer tracks {len(state.m)} tensors, got {len(params)}")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != m.shape or g.shape != m.shape:
            raise ContractError(f"shape drift: param {p.shape}, grad {g.shape}, state {m.shape}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay and state.decoupled:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Optimizer over a fixed list of parameters; missing grads count as zero."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decoupled: bool = False):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                    weight_decay=weight_decay, decoupled=decoupled)

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        optimizer_step([p.data for p in self.params], grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def AdamW(params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01) -> Adam:
    return Adam(params, lr, betas, eps, weight_decay, decoupled=True)
