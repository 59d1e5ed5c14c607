"""Adam with bias correction, plus constant and cosine-decay LR schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, ValidationError

SCHEDULES = ("constant", "cosine")


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "constant"
    total_steps: int = 0  # required for the cosine schedule
    seed: int = 0  # data-order RNG seed, owned by the training loop
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValidationError(f"unknown schedule {self.schedule!r}, expected one of {SCHEDULES}")
        if self.schedule == "cosine" and self.total_steps <= 0:
            raise ValidationError("cosine schedule requires total_steps > 0")


def current_lr(state: OptimizerState) -> float:
    """LR for the upcoming step (step_count completed steps so far)."""
    if state.schedule == "constant":
        return state.lr
    frac = min(state.step_count, state.total_steps) / state.total_steps
    return state.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def optimizer_step(state: OptimizerState, params: dict[str, Tensor], grads) -> None:
    """One Adam update, in place.  grads maps name -> array (or Tensor)."""
    lr_t = current_lr(state)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.betas
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        if g.shape != p.shape:
            raise ContractError(f"grad/param shape mismatch for {name!r}: {g.shape} vs {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data -= np.asarray(lr_t * update, dtype=p.data.dtype)
