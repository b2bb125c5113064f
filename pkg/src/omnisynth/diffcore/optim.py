"""Adam optimizer and the exponential learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DiffcoreError, NonFiniteError, ShapeError, Tensor

__all__ = ["AdamState", "adam_step", "lr_schedule"]


@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> dict[str, Tensor]:
    """One bias-corrected Adam update, in place on the parameter tensors.

    Parameters missing from ``grads`` are treated as zero-gradient (their
    moments still decay). Shapes are validated against the accumulators.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data = p.data - update.astype(p.data.dtype, copy=False)
        if not np.isfinite(p.data).all():
            raise NonFiniteError(f"parameter {name} became non-finite after Adam step {t}")
    return params


def lr_schedule(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    """Exponential decay from lr_start (step 0) to lr_end (step total_steps)."""
    if lr_start <= 0 or lr_end <= 0:
        raise DiffcoreError("learning rates must be positive")
    if total_steps <= 0:
        raise DiffcoreError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise DiffcoreError(f"step {step} outside [0, {total_steps}]")
    return lr_start * (lr_end / lr_start) ** (step / total_steps)
