"""Minimal module system: parameter registration, layers, state dicts.

Parameters are discovered by walking instance attributes in definition
order, which gives canonical dotted names such as ``blocks.0.attn.qkv.weight``.
Buffers (running statistics) are plain arrays listed in ``_buffers`` and are
persisted alongside parameters but never optimised.
"""
from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..errors import ContractError
from . import functional as F
from .rng import Rng
from .tensor import Tensor


class Parameter(Tensor):
    """Leaf tensor that a :class:`Module` registers as trainable."""

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)


class Module:
    training: bool = True

    def __init__(self):
        self._buffers: List[str] = []

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    # -- traversal --------------------------------------------------------
    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", []):
            yield prefix + name, getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    # -- modes ------------------------------------------------------------
    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    # -- persistence ------------------------------------------------------
    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[name] = buf.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise ContractError(f"state dict mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ContractError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
        for name, buf in buffers.items():
            buf[...] = state[name]


class ModuleList(Module):
    """Ordered container; children are named by index."""

    def __init__(self, modules=()):
        super().__init__()
        self._items: List[Module] = list(modules)

    def _children(self):
        for i, m in enumerate(self._items):
            yield str(i), m

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


# -- initialisers -------------------------------------------------------------

def trunc_normal(rng: Rng, shape, std: float = 0.02) -> np.ndarray:
    return rng.truncated_normal(shape, std)


def he_normal(rng: Rng, shape, fan_in: int) -> np.ndarray:
    return rng.normal(shape) * np.sqrt(2.0 / fan_in)


# -- layers -------------------------------------------------------------------

class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: Rng, bias: bool = True,
                 init: str = "trunc_normal", std: float = 0.02):
        super().__init__()
        shape = (out_features, in_features)
        if init == "trunc_normal":
            w = trunc_normal(rng, shape, std)
        elif init == "he":
            w = he_normal(rng, shape, in_features)
        elif init == "normal":
            w = rng.normal(shape) * std
        elif init == "xavier":
            limit = np.sqrt(6.0 / (in_features + out_features))
            w = rng.uniform(-limit, limit, shape)
        else:
            raise ContractError(f"unknown init {init!r}")
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x):
        return F.layernorm(x, self.weight, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int, padding: int, rng: Rng,
                 bias: bool = True, init: str = "he", std: float = 0.02):
        super().__init__()
        shape = (cout, cin, k, k)
        w = he_normal(rng, shape, cin * k * k) if init == "he" else rng.normal(shape) * std
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout)) if bias else None
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int, padding: int, rng: Rng,
                 bias: bool = True, std: float = 0.02):
        super().__init__()
        self.weight = Parameter(rng.normal((cin, cout, k, k)) * std)
        self.bias = Parameter(np.zeros(cout)) if bias else None
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self._buffers = ["running_mean", "running_var"]

    def forward(self, x):
        return F.batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: Rng, std: float = 1.0):
        super().__init__()
        self.weight = Parameter(rng.normal((num, dim)) * std)

    def forward(self, ids):
        return F.embedding(self.weight, ids)


class Dropout(Module):
    """Dropout whose masks come from an explicitly supplied stream."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self._rng: Optional[Rng] = None

    def seed(self, rng: Optional[Rng]) -> None:
        self._rng = rng

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        return F.dropout(x, self.p, self._rng.generator if self._rng else None, True)


def seed_dropout(module: Module, rng: Optional[Rng]) -> None:
    """Give every dropout layer in ``module`` its own child stream of ``rng``."""
    for i, m in enumerate(m for m in module.modules() if isinstance(m, Dropout)):
        m.seed(rng.child(i) if rng is not None else None)
