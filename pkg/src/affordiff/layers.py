"""Parameter containers built on :mod:`affordiff.numerics`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class Module:
    """Tracks parameters held in attributes (Tensors, Modules, lists of Modules)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))


def _param(data: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32,
                 bias: bool = True, scale: float = 1.0):
        std = scale * math.sqrt(2.0 / (n_in + n_out))
        self.weight = _param(rng.normal(0.0, std, size=(n_in, n_out)), dtype)
        self.bias = _param(np.zeros(n_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return nx.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32):
        self.gain = _param(np.ones(d), dtype)
        self.bias = _param(np.zeros(d), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, dtype=np.float32):
        if d % n_heads:
            raise ValueError(f"d_model {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d, d, rng, dtype)
        self.v = Linear(d, d, rng, dtype)
        self.out = Linear(d, d, rng, dtype)

    def __call__(self, x: Tensor, context: Tensor | None = None, mask=None) -> Tensor:
        context = x if context is None else context
        h = nx.attention(self.q(x), self.k(context), self.v(context), mask=mask, n_heads=self.n_heads)
        return self.out(h)


class MLP(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(d, hidden, rng, dtype)
        self.fc2 = Linear(hidden, d, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nx.gelu(self.fc1(x)))
