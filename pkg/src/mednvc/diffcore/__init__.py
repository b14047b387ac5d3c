"""Differentiable computation substrate: tensors, autograd ops, Lion, LR schedule."""
from __future__ import annotations

import os
from typing import Optional

from . import ops
from .gradcheck import GradCheckResult, gradcheck, numerical_grad
from .ops import (add, conv2d, conv_output_size, div, gelu, layer_norm, linear, matmul, mean, mul,
                  reshape, softmax, sub, transpose)
from .optim import LrSchedule, OptimizerState, TrainingStepError, lion_step, lr_at
from .tensor import (DimensionError, NonFiniteError, Tensor, as_tensor, check_finite, default_dtype,
                     grad_enabled, no_grad, precision, set_default_dtype)

THREADS_ENV = "MED_NVC_THREADS"
_thread_limiter = None


def configure_threads(n: Optional[int] = None) -> int:
    """Cap BLAS/OpenMP threads; ``0`` (the default) means single-threaded.

    ``n`` defaults to the ``MED_NVC_THREADS`` environment variable. Returns
    the effective thread count.
    """
    global _thread_limiter
    if n is None:
        raw = os.environ.get(THREADS_ENV, "0")
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError(f"thread count must be nonnegative, got {n}")
    limit = max(1, n)
    from threadpoolctl import threadpool_limits
    _thread_limiter = threadpool_limits(limits=limit)
    return limit


__all__ = [
    "Tensor", "DimensionError", "NonFiniteError", "TrainingStepError",
    "as_tensor", "check_finite", "default_dtype", "set_default_dtype", "precision", "no_grad", "grad_enabled",
    "ops", "add", "sub", "mul", "div", "matmul", "linear", "reshape", "transpose", "mean",
    "conv2d", "conv_output_size", "layer_norm", "gelu", "softmax",
    "LrSchedule", "OptimizerState", "lion_step", "lr_at",
    "GradCheckResult", "gradcheck", "numerical_grad", "configure_threads", "THREADS_ENV",
]
