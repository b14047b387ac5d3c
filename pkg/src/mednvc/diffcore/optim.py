"""Lion (sign-momentum) optimizer and the warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .tensor import Tensor


class TrainingStepError(RuntimeError):
    """An optimizer step could not be applied (e.g. a non-finite gradient)."""


@dataclass
class OptimizerState:
    """Per-parameter momentum plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    step_count: int = 0
    momentum: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, b in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 < b < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {b}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")


def lion_step(params: Mapping[str, Tensor], state: OptimizerState, lr: float, grads: Mapping[str, np.ndarray] = None) -> OptimizerState:
    """Apply one Lion update in place.

    ``grads`` defaults to each parameter's ``.grad``; parameters without a
    gradient are left untouched. All gradients are validated before any
    parameter is modified, so a failed step leaves the model unchanged.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be nonnegative, got {lr}")
    if grads is None:
        grads = {name: p.grad for name, p in params.items() if p.grad is not None}
    for name, g in grads.items():
        if name not in params:
            raise TrainingStepError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise TrainingStepError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.isfinite(g).all():
            raise TrainingStepError(f"non-finite gradient for parameter {name!r}")

    b1, b2, wd = state.beta1, state.beta2, state.weight_decay
    for name, g in grads.items():
        p = params[name]
        m = state.momentum.get(name)
        if m is None:
            m = np.zeros_like(p.data)
        update = np.sign(b1 * m + (1.0 - b1) * g)
        if wd:
            update = update + wd * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)
        state.momentum[name] = (b2 * m + (1.0 - b2) * g).astype(p.data.dtype, copy=False)
    state.step_count += 1
    return state


@dataclass(frozen=True)
class LrSchedule:
    """Per-epoch linear warmup to ``peak_lr`` followed by cosine decay to ``floor_lr``."""

    warmup_epochs: int
    peak_lr: float
    floor_lr: float
    total_epochs: int

    def __post_init__(self):
        if self.warmup_epochs < 1:
            raise ValueError(f"warmup_epochs must be a positive integer, got {self.warmup_epochs}")
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be a positive integer, got {self.total_epochs}")
        if not self.peak_lr > 0:
            raise ValueError(f"peak_lr must be positive, got {self.peak_lr}")
        if not 0 < self.floor_lr <= self.peak_lr:
            raise ValueError(f"floor_lr must lie in (0, peak_lr], got {self.floor_lr}")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Learning rate for ``epoch`` (0-based).

    Epochs ``0 .. warmup-1`` ramp linearly from ``peak/warmup`` to ``peak``;
    from ``warmup`` on the rate follows a half cosine that starts at ``peak``
    and lands on ``floor`` at the final epoch.
    """
    s = schedule
    if not 0 <= epoch < s.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {s.total_epochs})")
    if epoch < s.warmup_epochs:
        return s.peak_lr * (epoch + 1) / s.warmup_epochs
    span = s.total_epochs - s.warmup_epochs - 1
    t = (epoch - s.warmup_epochs) / span if span > 0 else 0.0
    return s.floor_lr + 0.5 * (s.peak_lr - s.floor_lr) * (1.0 + math.cos(math.pi * t))
