"""Differentiable operations on :class:`~dfkd.engine.tensor.Tensor`.

Each function computes its forward value with numpy and registers a closure
returning one gradient per input (``None`` for non-differentiable inputs).
Broadcasting follows numpy; gradients are summed back to the input shapes.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from ..errors import DomainError, ShapeError
from . import kernels
from .tensor import Tensor, as_tensor

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the axes that numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return Tensor._make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape)
        gb = unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return Tensor._make(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def pow(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor._make(a.data ** p, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,))


def abs(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# -- activations ------------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return Tensor._make(a.data * factor, (a,), lambda g: (g * factor,))


def gelu(a) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))

    def backward(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return Tensor._make(x * cdf, (a,), backward)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a) -> Tensor:
    """``log(1 + exp(x))`` without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return Tensor._make(out, (a,), lambda g: (g * _stable_sigmoid(x),))


# -- reductions and shape ops -------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum(a, axes, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(a.data[idx], (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return Tensor._make(np.stack([t.data for t in ts], axis=axis), tuple(ts), backward)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._make(out, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    out = matmul(x, transpose(weight, (1, 0)))
    return out if bias is None else add(out, bias)


# -- softmax family ---------------------------------------------------------

def _check_temperature(temperature: float) -> float:
    temperature = float(temperature)
    if not temperature > 0.0:
        raise DomainError(f"temperature must be > 0, got {temperature}")
    return temperature


def softmax_t(a, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """``exp(x/T)`` normalised along ``axis``, shifted by the max for stability."""
    a = as_tensor(a)
    t = _check_temperature(temperature)
    z = a.data / t
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)) / t,)

    return Tensor._make(out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    return softmax_t(a, 1.0, axis)


def log_softmax_t(a, temperature: float = 1.0, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    t = _check_temperature(temperature)
    z = a.data / t
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def backward(g):
        return ((g - probs * g.sum(axis=axis, keepdims=True)) / t,)

    return Tensor._make(out, (a,), backward)


# -- normalisation ----------------------------------------------------------

def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma``/``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layernorm over an empty last axis")
    if not eps > 0:
        raise DomainError("layernorm eps must be > 0")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, unbroadcast(g * xhat, gamma.shape), unbroadcast(g, beta.shape)

    return Tensor._make(out, (x, gamma, beta), backward)


def batchnorm2d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation of a (B, C, H, W) tensor.

    In training mode the batch statistics are used (biased variance) and the
    running buffers are updated in place with the unbiased variance. In eval
    mode the running buffers are used and the op is affine in ``x``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects (B, C, H, W), got {x.shape}")
    g4 = gamma.data.reshape(1, -1, 1, 1)
    b4 = beta.data.reshape(1, -1, 1, 1)
    axes = (0, 2, 3)
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        unbiased = var.reshape(-1) * count / max(count - 1, 1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def backward(g):
            gh = g * g4
            gx = inv * (gh - gh.mean(axis=axes, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        inv = 1.0 / np.sqrt(running_var.reshape(1, -1, 1, 1) + eps)
        xhat = (x.data - running_mean.reshape(1, -1, 1, 1)) * inv

        def backward(g):
            return g * g4 * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Tensor._make(xhat * g4 + b4, (x, gamma, beta), backward)


def dropout(x, p: float, rng: Optional[np.random.Generator], training: bool = True) -> Tensor:
    """Inverted dropout with a mask drawn from ``rng``."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise DomainError("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


def embedding(weight, ids) -> Tensor:
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DomainError(f"embedding index out of range [0, {weight.shape[0]})")

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor._make(weight.data[ids], (weight,), backward)


# -- convolution ------------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B, C, H, W) input with (O, C, k, k) weights."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: incompatible input {x.shape} and weight {w.shape}")
    bsz, c, h, wd = x.shape
    o, _, k, _ = w.shape
    if k > h + 2 * padding or k > wd + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h}x{wd} (padding {padding})")
    oh = conv_output_size(h, k, stride, padding)
    ow = conv_output_size(wd, k, stride, padding)
    cols = kernels.im2col(x.data, k, stride, padding)
    wm = w.data.reshape(o, -1)
    out = np.matmul(wm, cols).reshape(bsz, o, oh, ow)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, -1, 1, 1)
        parents = (x, w, b)

    def backward(g):
        gm = g.reshape(bsz, o, oh * ow)
        gw = np.einsum("bop,bkp->ok", gm, cols).reshape(w.shape)
        gx = kernels.col2im(np.matmul(wm.T, gm), x.shape, k, stride, padding) if x.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._make(out, parents, backward)


def conv_transpose_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n - 1) * stride - 2 * padding + k


def conv_transpose2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`: input (B, Cin, H, W), weight (Cin, Cout, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv_transpose2d: incompatible input {x.shape} and weight {w.shape}")
    bsz, cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    oh = conv_transpose_output_size(h, k, stride, padding)
    ow = conv_transpose_output_size(wd, k, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv_transpose2d: non-positive output size {oh}x{ow}")
    out_shape = (bsz, cout, oh, ow)
    if conv_output_size(oh, k, stride, padding) != h or conv_output_size(ow, k, stride, padding) != wd:
        raise ShapeError("conv_transpose2d: geometry is not the adjoint of a valid conv2d")
    wm = w.data.reshape(cin, -1)
    xm = x.data.reshape(bsz, cin, h * wd)
    out = kernels.col2im(np.matmul(wm.T, xm), out_shape, k, stride, padding)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, -1, 1, 1)
        parents = (x, w, b)

    def backward(g):
        gcols = kernels.im2col(g, k, stride, padding)
        gx = np.matmul(wm, gcols).reshape(x.shape)
        gw = np.einsum("bcp,bkp->ck", xm, gcols).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._make(out, parents, backward)


# -- losses used across modules ----------------------------------------------

def smooth_l1(d) -> Tensor:
    """Elementwise Smooth-L1: ``0.5 d^2`` if ``|d| < 1`` else ``|d| - 0.5``."""
    d = as_tensor(d)
    ad = np.abs(d.data)
    quad = ad < 1.0
    out = np.where(quad, 0.5 * d.data * d.data, ad - 0.5)
    slope = np.where(quad, d.data, np.sign(d.data))
    return Tensor._make(out, (d,), lambda g: (g * slope,))


def bce_with_logits(logits, targets) -> Tensor:
    """Mean of ``-y log s(x) - (1-y) log(1-s(x))`` over all entries."""
    logits = as_tensor(logits)
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if y.shape != logits.shape:
        y = np.broadcast_to(y, logits.shape)
    # softplus(x) - y*x == -y log s(x) - (1-y) log(1 - s(x))
    return mean(sub(softplus(logits), mul(logits, y)))
