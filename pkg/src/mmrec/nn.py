"""Layer building blocks on top of :mod:`mmrec.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Holds parameters and submodules as attributes; names are dotted paths."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def param(rng: np.random.Generator, shape, std: float | None = None, value: float | None = None) -> Tensor:
    if value is not None:
        data = np.full(shape, value, dtype=np.float32)
    else:
        data = (rng.standard_normal(shape) * (std if std is not None else 0.02)).astype(np.float32)
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, std: float | None = None):
        self.w = param(rng, (d_in, d_out), std=std if std is not None else d_in**-0.5)
        self.b = param(rng, (d_out,), value=0.0) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.g = param(None, (d,), value=1.0)
        self.b = param(None, (d,), value=0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.g, self.b)


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, d: int, mult: int = 4):
        self.norm = LayerNorm(d)
        self.up = Linear(rng, d, d * mult)
        self.down = Linear(rng, d * mult, d, std=(d * mult) ** -0.5 * 0.5)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(x, self.down(T.gelu(self.up(self.norm(x)))))


class MultiHeadAttention(Module):
    """Pre-norm self-attention with an optional additive mask over (T, T)."""

    def __init__(self, rng: np.random.Generator, d: int, heads: int):
        if d % heads:
            raise ValueError(f"hidden size {d} not divisible by {heads} heads")
        self.heads = heads
        self.norm = LayerNorm(d)
        self.qkv = Linear(rng, d, 3 * d)
        self.out = Linear(rng, d, d, std=d**-0.5 * 0.5)

    def __call__(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        b, t, d = x.shape
        h = self.heads
        dh = d // h
        qkv = T.reshape(self.qkv(self.norm(x)), (b, t, 3, h, dh))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # 3, b, h, t, dh
        q, k, v = T.unbind(qkv)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), dh**-0.5)
        full_mask = None if mask is None else np.broadcast_to(mask, scores.shape)
        att = T.masked_softmax(scores, full_mask)
        ctx = T.matmul(att, v)  # b, h, t, dh
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return T.add(x, self.out(ctx))


def causal_mask(t: int, dtype=np.float32) -> np.ndarray:
    m = np.zeros((t, t), dtype=dtype)
    m[np.triu_indices(t, 1)] = -np.inf
    return m
