"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d fn / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = fn()
        flat[i] = orig - h
        minus = fn()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Largest entrywise ``|a - n| / max(|a|, |n|)``.

    Entries where both magnitudes are below ``floor`` are compared against
    ``floor`` instead, so exact zeros do not produce 0/0.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between autodiff and finite differences.

    ``fn(*inputs)`` must return a scalar tensor. A fixed random projection of
    a non-scalar output is not applied here; callers reduce to a scalar
    themselves (typically ``sum(out * fixed_weights)``).
    """
    for t in inputs:
        t.grad = None
    loss = fn(*inputs)
    loss.backward()
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(lambda: fn(*inputs).item(), t.data, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
