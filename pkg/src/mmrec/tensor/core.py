"""Reverse-mode autodiff over dense numpy arrays.

Every primitive records one node (inputs, output, backward rule) with a
monotonically increasing sequence number. ``backward`` collects the nodes
reachable from the loss and replays them in reverse recording order, which
guarantees each node is visited after all of its consumers.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_seq)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; all routes go through the primitives below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def parameter(data, name: str | None = None, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients accumulate across calls; clearing them is the caller's job.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Same-shape add, or add of a trailing-dimension vector ``b``."""
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return _result(
            a.data + b.data, (a, b), lambda g: (g, g.reshape(-1, b.shape[0]).sum(axis=0))
        )
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),))


def scale_by(a: Tensor, s: Tensor) -> Tensor:
    """Multiply ``a`` by a single-element tensor ``s`` (e.g. a gate)."""
    if s.size != 1:
        raise ShapeError(f"scale_by: scale must have one element, got {s.shape}")
    sv = s.data.reshape(())

    def rule(g):
        return g * sv, np.asarray(np.sum(g * a.data), dtype=s.dtype).reshape(s.shape)

    return _result(a.data * sv, (a, s), rule)


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array of identical shape."""
    c = np.asarray(c, dtype=a.dtype)
    if c.shape != a.shape:
        raise ShapeError(f"mul_const: incompatible shapes {a.shape} and {c.shape}")
    return _result(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1 - out * out),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(a.data * pos, (a,), lambda g: (g * pos,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    x2 = x * x
    t = np.tanh(c * x * (1 + x.dtype.type(0.044715) * x2))
    out = 0.5 * x * (1 + t)

    def rule(g):
        dinner = c * (1 + x.dtype.type(3 * 0.044715) * x2)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return _result(out, (a,), rule)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = a.data >= lo
    return _result(np.maximum(a.data, a.dtype.type(lo)), (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return _result(
        np.asarray(a.data.mean(), dtype=a.dtype), (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),)
    )


def weighted_sum(a: Tensor, w: np.ndarray) -> Tensor:
    """Scalar ``sum(a * w)`` for a constant weight array of identical shape."""
    w = np.asarray(w, dtype=a.dtype)
    if w.shape != a.shape:
        raise ShapeError(f"weighted_sum: incompatible shapes {a.shape} and {w.shape}")
    return _result(np.asarray((a.data * w).sum(), dtype=a.dtype), (a,), lambda g: (g * w,))


def mean_axis(a: Tensor, axis: int) -> Tensor:
    axis = axis % a.ndim
    n = a.shape[axis]

    def rule(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return _result(a.data.mean(axis=axis), (a,), rule)


# ---------------------------------------------------------------------------
# shape


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def unbind(a: Tensor) -> tuple[Tensor, ...]:
    """Split along the leading axis into ``a.shape[0]`` tensors."""

    def piece(i: int) -> Tensor:
        def rule(g):
            full = np.zeros(a.shape, dtype=g.dtype)
            full[i] = g
            return (full,)

        return _result(a.data[i], (a,), rule)

    return tuple(piece(i) for i in range(a.shape[0]))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, rule)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor (also used as embedding lookup)."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D table, got {a.shape}")

    def rule(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, a.shape[1]))
        return (out,)

    return _result(a.data[idx], (a,), rule)


def add_rows(a: Tensor, idx: np.ndarray, src: Tensor) -> Tensor:
    """``out = a; out[idx] += src`` for 2-D ``a`` and ``src`` of shape (len(idx), d)."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2 or src.shape != (len(idx), a.shape[1]):
        raise ShapeError(f"add_rows: table {a.shape}, rows {src.shape}, {len(idx)} indices")
    out = a.data.copy()
    np.add.at(out, idx, src.data)
    return _result(out, (a, src), lambda g: (g, g[idx]))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    return take_rows(table, ids)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched when both operands share identical leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _result(np.matmul(a.data, b.data), (a, b), rule)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w (+ b)`` over the last axis of ``x``."""
    lead = x.shape[:-1]
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = add(y, b)
    return reshape(y, (*lead, w.shape[1]))


# ---------------------------------------------------------------------------
# normalisation / softmax / losses


def masked_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with an additive {0, -inf} mask.

    Rows where every entry is masked produce all-zero output (and gradient).
    """
    z = x.data
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != z.shape:
            raise ShapeError(f"masked_softmax: mask shape {mask.shape} != logits {z.shape}")
        z = z + mask.astype(z.dtype, copy=False)
    m = np.max(z, axis=-1, keepdims=True)
    dead = ~np.isfinite(m)
    m = np.where(dead, 0, m)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    out = e / np.where(s == 0, 1, s)
    if dead.any():
        out = np.where(dead, 0, out)

    def rule(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out.astype(x.dtype, copy=False), (x,), rule)


def softmax(x: Tensor) -> Tensor:
    return masked_softmax(x, None)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def rule(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        ggain = (flat_g * xhat.reshape(-1, d)).sum(axis=0) if gain.requires_grad else None
        gbias = flat_g.sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), rule)


def cross_entropy_logits(logits: Tensor, targets: np.ndarray, ignore_index: int = -100) -> Tensor:
    """Per-row negative log-likelihood ``-log softmax(logits_i)[t_i]``.

    Rows whose target equals ``ignore_index`` yield 0 and no gradient.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_logits expects (N, V) logits, got {logits.shape}")
    n, v = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != n:
        raise ShapeError(f"cross_entropy_logits: {n} rows but {t.shape[0]} targets")
    keep = t != ignore_index
    bad = keep & ((t < 0) | (t >= v))
    if bad.any():
        raise IndexError(f"target {int(t[bad][0])} out of range for {v} classes")
    safe_t = np.where(keep, t, 0)
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    logz = np.log(s) + m
    rows = np.arange(n)
    nll = (logz[:, 0] - z[rows, safe_t]) * keep

    def rule(g):
        p = e / s
        p[rows, safe_t] -= 1
        return ((p * (g * keep)[:, None]).astype(logits.dtype, copy=False),)

    return _result(nll.astype(logits.dtype, copy=False), (logits,), rule)


def focal_token_loss(p: Tensor, gamma: float) -> Tensor:
    """Per-token ``-(1 - p)**gamma * log p`` for likelihoods ``p`` in (0, 1].

    Gradient flows through both the log term and the modulating factor.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    pv = p.data
    if np.any(pv <= 0):
        raise ValueError("focal_token_loss needs p > 0; clamp before calling")
    logp = np.log(pv)
    if gamma == 0:
        return _result(-logp, (p,), lambda g: (-g / pv,))
    q = np.clip(1 - pv, 0, None)
    w = q**gamma
    out = -w * logp

    def rule(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            dw = np.where(q > 0, gamma * q ** (gamma - 1) * logp, 0)
        return (g * (dw - w / pv),)

    return _result(out.astype(p.dtype, copy=False), (p,), rule)
