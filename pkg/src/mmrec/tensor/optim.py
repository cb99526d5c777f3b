from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ShapeError, Tensor


@dataclass
class AdamWState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamWState) -> None:
    """One AdamW update with decoupled weight decay and bias-corrected moments.

    Parameters with no gradient entry (frozen, or unreached) are left untouched
    apart from the shared step counter.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adamw_step: grad {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if state.weight_decay:
            p.data *= p.dtype.type(1 - state.lr * state.weight_decay)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= (state.lr * update).astype(p.dtype, copy=False)


def lr_at(step: int, total_steps: int, base_lr: float, warmup_fraction: float) -> float:
    """Linear warm-up to ``base_lr`` then cosine decay to zero at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_fraction * total_steps
    if step < warm:
        return base_lr * step / warm
    if total_steps <= warm:
        return base_lr
    progress = (step - warm) / (total_steps - warm)
    return base_lr * 0.5 * (1 + math.cos(math.pi * progress))
