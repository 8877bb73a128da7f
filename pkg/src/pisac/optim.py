"""Adam optimizer and exponential-moving-average parameter blending."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import DimensionError, Tensor


@dataclass
class AdamState:
    """Per-parameter Adam moments plus a shared step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[Tensor]) -> None:
    """One bias-corrected Adam update; gradients are reset to zero after.

    Parameters without an accumulated gradient are treated as having a zero
    gradient (their moments still decay).
    """
    if not state.m:
        state.m = [np.zeros_like(p.values) for p in params]
        state.v = [np.zeros_like(p.values) for p in params]
    if len(state.m) != len(params):
        raise DimensionError(
            f"adam_step: state tracks {len(state.m)} params, got {len(params)}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad if p.grad is not None else 0.0
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p.values -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if p.grad is not None:
            p.grad.fill(0.0)


def ema_blend(target: Tensor | Sequence[Tensor],
              source: Tensor | Sequence[Tensor],
              rate: float) -> None:
    """In-place convex blend: target <- rate * source + (1 - rate) * target."""
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"ema_blend: rate must be in (0, 1], got {rate}")
    targets = [target] if isinstance(target, Tensor) else list(target)
    sources = [source] if isinstance(source, Tensor) else list(source)
    if len(targets) != len(sources):
        raise DimensionError(
            f"ema_blend: {len(targets)} targets vs {len(sources)} sources")
    for t, s in zip(targets, sources):
        if t.values.shape != s.values.shape:
            raise DimensionError(
                f"ema_blend: shape {t.values.shape} != {s.values.shape}")
        t.values *= 1.0 - rate
        t.values += rate * s.values
