"""Differentiable operations on :class:`~mednvc.diffcore.tensor.Tensor`.

Every op computes its forward value with numpy and records a closure that
maps the output gradient to one gradient per operand (``None`` where an
operand needs none). Layouts follow the usual conventions: images are NCHW,
linear weights are ``(out_features, in_features)``.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided, sliding_window_view
from scipy.special import ndtr

from .tensor import DimensionError, Tensor, as_tensor

Operand = Union[Tensor, np.ndarray, float, int]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _lift(x: Operand, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _pair(a: Operand, b: Operand) -> tuple:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    if isinstance(b, Tensor):
        return _lift(a, b), b
    a = as_tensor(a)
    return a, _lift(b, a)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic -------------------------------------------------------

def add(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad * bd, (a, b), backward, "mul")


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd  # non-finite results are reported by the tape check

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward, "div")


# -- shape ops ---------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(src),)

    return Tensor._from_op(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return Tensor._from_op(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward, "transpose")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    src = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._from_op(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([src[a] for a in axes]))
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=x.dtype), (x,), backward, "mean")


# -- linear algebra ----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands need >= 2 axes, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner dimensions differ (a axis -1 = {a.shape[-1]}, b axis -2 = {b.shape[-2]})")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch axes {a.shape[:-2]} and {b.shape[:-2]} do not broadcast") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``."""
    if weight.ndim != 2:
        raise DimensionError(f"linear: weight must be 2-D, got {weight.shape}")
    out_f, in_f = weight.shape
    if x.shape[-1] != in_f:
        raise DimensionError(f"linear: input axis -1 = {x.shape[-1]} but weight expects {in_f}")
    if bias is not None and bias.shape != (out_f,):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({out_f},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, in_f)
    w = weight.data
    out = x2 @ w.T
    if bias is not None:
        out += bias.data

    def backward(g):
        g2 = g.reshape(-1, out_f)
        gx = (g2 @ w).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out.reshape(lead + (out_f,)), parents, backward, "linear")


# -- convolution -------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation on NCHW input; weight is ``(O, C // groups, kh, kw)``."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be NCHW (4 axes), got shape {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d: weight must have 4 axes, got shape {weight.shape}")
    if stride < 1 or padding < 0 or groups < 1:
        raise ValueError(f"conv2d: need stride >= 1, padding >= 0, groups >= 1 (got {stride}, {padding}, {groups})")
    N, C, H, W = x.shape
    O, Cg, kh, kw = weight.shape
    if C % groups:
        raise DimensionError(f"conv2d: input channels (axis 1) = {C} not divisible by groups = {groups}")
    if O % groups:
        raise DimensionError(f"conv2d: output channels (weight axis 0) = {O} not divisible by groups = {groups}")
    if Cg * groups != C:
        raise DimensionError(
            f"conv2d: input channels (axis 1) = {C} but weight axis 1 = {Cg} with groups = {groups}")
    if bias is not None and bias.shape != (O,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({O},)")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding} (axes 2, 3)")
    Ho, Wo = conv_output_size(H, kh, stride, padding), conv_output_size(W, kw, stride, padding)

    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd

    if groups == C and O == C and stride == 1:
        out, back = _depthwise(xp, wd, Ho, Wo)
    elif groups == 1:
        out, back = _dense(xp, wd, stride, Ho, Wo)
    else:
        out, back = _grouped(xp, wd, stride, groups, Ho, Wo)
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1)

    def backward(g):
        gxp, gw = back(g)
        gx = None
        if x.requires_grad:
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
            gx = np.ascontiguousarray(gx)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, (gw if weight.requires_grad else None), gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


def _dense(xp: np.ndarray, wd: np.ndarray, s: int, Ho: int, Wo: int):
    N, C, Hp, Wp = xp.shape
    O, _, kh, kw = wd.shape
    wm = wd.reshape(O, -1)

    if kh == 1 and kw == 1 and s == 1:
        x3 = xp.reshape(N, C, Hp * Wp)
        out = np.matmul(wm, x3).reshape(N, O, Ho, Wo)

        def back(g):
            g3 = g.reshape(N, O, Ho * Wo)
            gw = np.matmul(g3, x3.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
            gxp = np.matmul(wm.T, g3).reshape(xp.shape)
            return gxp, gw

        return out, back

    tiled = kh == kw == s and Hp == Ho * kh and Wp == Wo * kw
    if tiled:
        cols = xp.reshape(N, C, Ho, kh, Wo, kw).transpose(0, 2, 4, 1, 3, 5).reshape(N * Ho * Wo, C * kh * kw)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    out = np.ascontiguousarray((cols @ wm.T).reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2))

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(wd.shape)
        dcols = (g2 @ wm).reshape(N, Ho, Wo, C, kh, kw)
        if tiled:
            gxp = dcols.transpose(0, 3, 1, 4, 2, 5).reshape(xp.shape)
        else:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gxp, gw

    return out, back


def _grouped(xp: np.ndarray, wd: np.ndarray, s: int, groups: int, Ho: int, Wo: int):
    C = xp.shape[1]
    O = wd.shape[0]
    ci, co = C // groups, O // groups
    parts = [_dense(np.ascontiguousarray(xp[:, k * ci:(k + 1) * ci]), wd[k * co:(k + 1) * co], s, Ho, Wo)
             for k in range(groups)]
    out = np.concatenate([p[0] for p in parts], axis=1)

    def back(g):
        gxp = np.empty_like(xp)
        gw = np.empty_like(wd)
        for k, (_, b) in enumerate(parts):
            gx_k, gw_k = b(np.ascontiguousarray(g[:, k * co:(k + 1) * co]))
            gxp[:, k * ci:(k + 1) * ci] = gx_k
            gw[k * co:(k + 1) * co] = gw_k
        return gxp, gw

    return out, back


def _bands(wd: np.ndarray, Wp: int, Wo: int) -> np.ndarray:
    """Per-row banded matrices: ``B[i, c, w + j, w] = wd[c, 0, i, j]``."""
    C, _, kh, kw = wd.shape
    B = np.zeros((kh, C, Wp, Wo), dtype=wd.dtype)
    cols = np.arange(Wo)
    for j in range(kw):
        B[:, :, cols + j, cols] = wd[:, 0, :, j].T[:, :, None]
    return B


def _depthwise(xp: np.ndarray, wd: np.ndarray, Ho: int, Wo: int):
    """Stride-1 depthwise conv as one banded matmul per kernel row (channel-major layout).

    A row of the kernel slides along W, which is the same as multiplying each
    image row by a Toeplitz band matrix. Batched over channels, BLAS does the
    rest; this is several times faster than a shifted-slice loop.
    """
    N, C, Hp, Wp = xp.shape
    kh, kw = wd.shape[2:]
    B = _bands(wd, Wp, Wo)
    xt = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))
    out = np.zeros((C, N, Ho, Wo), dtype=np.result_type(xp, wd))
    for i in range(kh):
        out += np.matmul(xt[:, :, i:i + Ho, :].reshape(C, N * Ho, Wp), B[i]).reshape(C, N, Ho, Wo)

    def back(g):
        G = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(C, N * Ho, Wo)
        GT = G.transpose(0, 2, 1)
        gxt = np.zeros_like(xt)
        gw = np.empty_like(wd)
        for i in range(kh):
            gxt[:, :, i:i + Ho, :] += np.matmul(G, B[i].transpose(0, 2, 1)).reshape(C, N, Ho, Wp)
            # weight row i: sums along the diagonals of G^T X_i
            T = np.matmul(GT, xt[:, :, i:i + Ho, :].reshape(C, N * Ho, Wp))
            s = T.strides
            gw[:, 0, i, :] = as_strided(T, (C, kw, Wo), (s[0], s[2], s[1] + s[2])).sum(axis=2)
        return np.ascontiguousarray(gxt.transpose(1, 0, 2, 3)), gw

    return np.ascontiguousarray(out.transpose(1, 0, 2, 3)), back


# -- normalization and activations -------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6, axis: int = 1) -> Tensor:
    """Normalize over a single axis (the channel axis), then apply a per-channel affine map."""
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    axis = axis % x.ndim
    C = x.shape[axis]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(
            f"layer_norm: axis {axis} has {C} channels but gamma/beta have shapes {gamma.shape}/{beta.shape}")
    bshape = [1] * x.ndim
    bshape[axis] = C
    gb, bb = gamma.data.reshape(bshape), beta.data.reshape(bshape)
    others = tuple(i for i in range(x.ndim) if i != axis)

    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=axis, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gb + bb

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gb
            gx = rstd * (dxhat - dxhat.mean(axis=axis, keepdims=True)
                         - xhat * np.mean(dxhat * xhat, axis=axis, keepdims=True))
        dgamma = np.sum(g * xhat, axis=others) if gamma.requires_grad else None
        dbeta = np.sum(g, axis=others) if beta.requires_grad else None
        return gx, dgamma, dbeta

    return Tensor._from_op(out, (x, gamma, beta), backward, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the standard normal CDF (erf form)."""
    xd = x.data
    cdf = ndtr(xd)
    out = xd * cdf

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return Tensor._from_op(out.astype(xd.dtype, copy=False), (x,), backward, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    xd = x.data
    z = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), backward, "softmax")
