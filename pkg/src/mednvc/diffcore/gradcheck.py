"""Central finite-difference gradient checks.

The numerical side only ever calls the forward function, so it stays an
independent oracle for the hand-written backward closures.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckResult:
    max_rel_err: float
    max_abs_err_near_zero: float
    checked: int

    def ok(self, rel_tol: float = 1e-3, abs_tol: float = 1e-6) -> bool:
        return self.max_rel_err < rel_tol and self.max_abs_err_near_zero < abs_tol


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, indices, eps: float = 1e-4) -> np.ndarray:
    """d fn() / d x at the given flat ``indices`` by central differences."""
    flat = x.data.reshape(-1)
    out = np.empty(len(indices))
    with no_grad():
        for k, i in enumerate(indices):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn().data.sum())
            flat[i] = orig - eps
            fm = float(fn().data.sum())
            flat[i] = orig
            out[k] = (fp - fm) / (2.0 * eps)
    return out


def gradcheck(fn: Callable[[], Tensor], inputs: Dict[str, Tensor], eps: float = 1e-4,
              max_per_input: Optional[int] = None, seed: int = 0,
              near_zero: float = 1e-8) -> GradCheckResult:
    """Compare autograd gradients of the scalar ``fn()`` with central differences.

    ``fn`` must read the tensors in ``inputs`` (which are perturbed in place).
    Elements whose analytic gradient is below ``near_zero`` in magnitude are
    compared by absolute error; all others by relative error. With
    ``max_per_input`` only a random subset of each input's elements is probed.
    """
    rng = np.random.default_rng(seed)
    for t in inputs.values():
        t.grad = None
        t.requires_grad = True
    out = fn()
    if out.size != 1:
        raise ValueError(f"gradcheck needs a scalar function, got shape {out.shape}")
    out.backward()

    worst_rel, worst_abs, checked = 0.0, 0.0, 0
    for name, t in inputs.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        n = t.size
        if max_per_input is not None and n > max_per_input:
            idx = np.sort(rng.choice(n, size=max_per_input, replace=False))
        else:
            idx = np.arange(n)
        num = numerical_grad(fn, t, idx, eps)
        ana = analytic.reshape(-1)[idx].astype(np.float64)
        small = np.abs(ana) < near_zero
        if small.any():
            worst_abs = max(worst_abs, float(np.max(np.abs(num[small] - ana[small]))))
        if (~small).any():
            a, b = ana[~small], num[~small]
            rel = np.abs(a - b) / np.maximum(np.abs(a), np.abs(b))
            worst_rel = max(worst_rel, float(rel.max()))
        checked += len(idx)
    return GradCheckResult(worst_rel, worst_abs, checked)
