"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LR_MAX = 2e-4
LR_MIN = 1e-7
WEIGHT_DECAY = 1e-4
BETAS = (0.9, 0.99)


@dataclass
class OptimState:
    lr: float = LR_MAX
    weight_decay: float = WEIGHT_DECAY
    betas: tuple[float, float] = BETAS
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None],
               state: OptimState, lr: float | None = None) -> None:
    """Update ``params`` in place and advance ``state`` by one step.

    A missing (``None``) gradient is treated as zero, so untouched parameters
    still receive weight decay.
    """
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    state.t += 1
    t = state.t
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"optimizer state for {name} has shape {m.shape}, parameter {p.shape}")
        dt = p.dtype.type
        if state.weight_decay:
            p *= dt(1.0 - lr * state.weight_decay)
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        denom = np.sqrt(v / dt(c2)) + dt(state.eps)
        p -= dt(lr / c1) * m / denom


def cosine_lr(step: int, total_steps: int, lr_max: float = LR_MAX, lr_min: float = LR_MIN) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))
