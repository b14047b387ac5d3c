"""ConvNeXt-V2 building blocks and the four-stage image encoder.

Layout: fixed pixel centring, a 4x4/stride-4 stem conv + LayerNorm, then four stages of
ConvNeXt-V2 blocks. Stages 2-4 open with LayerNorm + 2x2/stride-2 conv.
Every encoder entry point takes an optional masked-cell grid; when given,
all spatial mixing goes through :func:`~mednvc.masking.masked_conv2d` and
features stay zero at masked positions (the sparse pretraining encoder).
With ``masked=None`` the same code is the dense encoder.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .diffcore import DimensionError, Tensor, conv2d, layer_norm, gelu, linear, mean, mul, reshape, sub
from .masking import apply_visibility, masked_conv2d
from .params import ModelParams, ParamScope, ones, trunc_normal, zeros

STEM_STRIDE = 4
STAGE_STRIDE = 2
GRN_EPS = 1e-6
LN_EPS = 1e-6
# fixed input centring: the stem LayerNorm is scale invariant, so uncentred
# [0, 1] pixels would lose absolute brightness in smooth regions
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass(frozen=True)
class EncoderConfig:
    stage_dims: tuple = (32, 64, 128, 256)
    stage_depths: tuple = (1, 1, 2, 1)
    image_size: int = 224
    in_chans: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stage_dims", tuple(int(d) for d in self.stage_dims))
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        if len(self.stage_dims) != 4 or len(self.stage_depths) != 4:
            raise ValueError("stage_dims and stage_depths need exactly 4 entries each")
        if min(self.stage_dims) < 1 or min(self.stage_depths) < 1:
            raise ValueError("stage_dims and stage_depths must be positive")
        if self.image_size < self.total_stride or self.image_size % self.total_stride:
            raise ValueError(f"image_size must be a positive multiple of {self.total_stride}, got {self.image_size}")

    @property
    def total_stride(self) -> int:
        return STEM_STRIDE * STAGE_STRIDE ** 3

    def stride_at(self, stage: int) -> int:
        """Cumulative stride after ``stage`` stages (1-based)."""
        return STEM_STRIDE * STAGE_STRIDE ** (stage - 1)

    @property
    def grid_size(self) -> int:
        return self.image_size // self.total_stride

    def to_dict(self) -> dict:
        return {"stage_dims": list(self.stage_dims), "stage_depths": list(self.stage_depths),
                "image_size": self.image_size, "in_chans": self.in_chans}


# -- initialization ------------------------------------------------------------------

def init_block(dim: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    hidden = 4 * dim
    return {
        "dwconv.weight": trunc_normal(rng, (dim, 1, 7, 7)),
        "dwconv.bias": zeros(dim),
        "norm.weight": ones(dim),
        "norm.bias": zeros(dim),
        "pwconv1.weight": trunc_normal(rng, (hidden, dim)),
        "pwconv1.bias": zeros(hidden),
        "grn.gamma": zeros(hidden),
        "grn.beta": zeros(hidden),
        "pwconv2.weight": trunc_normal(rng, (dim, hidden)),
        "pwconv2.bias": zeros(dim),
    }


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> ModelParams:
    d = cfg.stage_dims
    p = ModelParams()
    p["encoder.stem.conv.weight"] = trunc_normal(rng, (d[0], cfg.in_chans, STEM_STRIDE, STEM_STRIDE))
    p["encoder.stem.conv.bias"] = zeros(d[0])
    p["encoder.stem.norm.weight"] = ones(d[0])
    p["encoder.stem.norm.bias"] = zeros(d[0])
    for s in range(4):
        if s > 0:
            p[f"encoder.downsample.{s}.norm.weight"] = ones(d[s - 1])
            p[f"encoder.downsample.{s}.norm.bias"] = zeros(d[s - 1])
            p[f"encoder.downsample.{s}.conv.weight"] = trunc_normal(rng, (d[s], d[s - 1], STAGE_STRIDE, STAGE_STRIDE))
            p[f"encoder.downsample.{s}.conv.bias"] = zeros(d[s])
        for b in range(cfg.stage_depths[s]):
            for k, v in init_block(d[s], rng).items():
                p[f"encoder.stages.{s}.{b}.{k}"] = v
    return p


def init_head(dim: int, rng: np.random.Generator, num_classes: int = 2) -> ModelParams:
    p = ModelParams()
    p["head.norm.weight"] = ones(dim)
    p["head.norm.bias"] = zeros(dim)
    p["head.fc.weight"] = trunc_normal(rng, (num_classes, dim))
    p["head.fc.bias"] = zeros(num_classes)
    return p


# -- global response normalization ---------------------------------------------------

def grn(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = GRN_EPS) -> Tensor:
    """Global response normalization over the spatial axes of an NCHW map.

    ``Gx_c`` is the spatial L2 norm of channel c, ``Nx_c = Gx_c / (mean_c Gx + eps)``
    and the output is ``gamma * (x * Nx) + beta + x``.
    """
    if x.ndim != 4:
        raise DimensionError(f"grn: input must be NCHW, got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"grn: input has {C} channels (axis 1) but gamma/beta are {gamma.shape}/{beta.shape}")
    xd = x.data
    N = x.shape[0]
    gv = gamma.data.reshape(1, C)
    G = np.sqrt(np.einsum("nchw,nchw->nc", xd, xd))
    D = G.mean(axis=1, keepdims=True) + eps
    Nx = G / D
    scale = 1.0 + gv * Nx  # out = x * scale + beta, one factor per (n, c)
    out = xd * scale.reshape(N, C, 1, 1) + beta.data.reshape(1, C, 1, 1)

    def backward(g):
        gx = None
        gxsum = np.einsum("nchw,nchw->nc", g, xd)
        if x.requires_grad:
            a = gxsum * gv
            dG = a / D - np.sum(a * G, axis=1, keepdims=True) / (C * D * D)
            # dG/dx = x / G; channels with G == 0 are all-zero, so their term vanishes
            k = np.where(G > 0, dG / np.where(G > 0, G, 1.0), 0.0)
            gx = g * scale.reshape(N, C, 1, 1) + xd * k.reshape(N, C, 1, 1)
        dgamma = np.sum(gxsum * Nx, axis=0) if gamma.requires_grad else None
        dbeta = np.sum(g, axis=(0, 2, 3)) if beta.requires_grad else None
        return gx, dgamma, dbeta

    return Tensor._from_op(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward, "grn")


# -- block and encoder ---------------------------------------------------------------

def pointwise(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-position linear map over the channel axis of an NCHW map (a 1x1 conv)."""
    out_c, in_c = weight.shape
    return conv2d(x, reshape(weight, (out_c, in_c, 1, 1)), bias)


def _conv(x, grid, weight, bias, stride=1, padding=0, groups=1):
    if grid is None:
        return conv2d(x, weight, bias, stride=stride, padding=padding, groups=groups)
    return masked_conv2d(x, grid, weight, bias, stride=stride, padding=padding, groups=groups)


def convnext_v2_block(x: Tensor, p: ParamScope, masked: Optional[np.ndarray] = None) -> Tensor:
    """``x + f(x)``: depthwise 7x7 -> LN -> C->4C -> GELU -> GRN -> 4C->C (no LayerScale)."""
    C = x.shape[1]
    if x.ndim != 4 or p["dwconv.weight"].shape[0] != C:
        raise DimensionError(f"block expects {p['dwconv.weight'].shape[0]} channels, got input {x.shape}")
    y = _conv(x, masked, p["dwconv.weight"], p["dwconv.bias"], padding=3, groups=C)
    y = layer_norm(y, p["norm.weight"], p["norm.bias"], eps=LN_EPS, axis=1)
    y = gelu(pointwise(y, p["pwconv1.weight"], p["pwconv1.bias"]))
    y = apply_visibility(y, masked)
    y = grn(y, p["grn.gamma"], p["grn.beta"])
    y = apply_visibility(pointwise(y, p["pwconv2.weight"], p["pwconv2.bias"]), masked)
    return x + y


def _check_input(x: Tensor, cfg: EncoderConfig) -> None:
    if x.ndim != 4 or x.shape[1] != cfg.in_chans:
        raise DimensionError(f"encoder input must be N x {cfg.in_chans} x H x W, got {x.shape}")
    H, W = x.shape[2:]
    if H % cfg.total_stride or W % cfg.total_stride:
        raise DimensionError(
            f"encoder input {H}x{W} (axes 2, 3) is not divisible by the total stride {cfg.total_stride}")


def stem(x: Tensor, cfg: EncoderConfig, params, masked: Optional[np.ndarray] = None) -> Tensor:
    p = params.scope("encoder.stem")
    x = mul(sub(x, PIXEL_MEAN), 1.0 / PIXEL_STD)
    y = _conv(x, masked, p["conv.weight"], p["conv.bias"], stride=STEM_STRIDE)
    y = layer_norm(y, p["norm.weight"], p["norm.bias"], eps=LN_EPS, axis=1)
    return apply_visibility(y, masked)


def run_stages(x: Tensor, cfg: EncoderConfig, params, start: int, stop: int,
               masked: Optional[np.ndarray] = None) -> Tensor:
    """Apply stages ``start .. stop-1`` (0-based) including their downsamplers."""
    for s in range(start, stop):
        if s > 0:
            ds = params.scope(f"encoder.downsample.{s}")
            x = layer_norm(x, ds["norm.weight"], ds["norm.bias"], eps=LN_EPS, axis=1)
            x = apply_visibility(x, masked)
            x = _conv(x, masked, ds["conv.weight"], ds["conv.bias"], stride=STAGE_STRIDE)
        for b in range(cfg.stage_depths[s]):
            x = convnext_v2_block(x, params.scope(f"encoder.stages.{s}.{b}"), masked)
    return x


def encoder_forward(x: Tensor, cfg: EncoderConfig, params, upto_stage: int = 4,
                    masked: Optional[np.ndarray] = None) -> Tensor:
    """Run the stem and the first ``upto_stage`` stages.

    ``upto_stage=2`` gives the stride-8 map used as the fusion point,
    ``upto_stage=4`` the stride-32 map. ``masked`` is a unit grid
    (``(gh, gw)`` or ``(N, gh, gw)``, True = masked) selecting sparse mode.
    """
    if upto_stage not in (1, 2, 3, 4):
        raise ValueError(f"upto_stage must be in 1..4, got {upto_stage}")
    _check_input(x, cfg)
    return run_stages(stem(x, cfg, params, masked), cfg, params, 0, upto_stage, masked)


def resume_from_stage3(features: Tensor, cfg: EncoderConfig, params,
                       masked: Optional[np.ndarray] = None) -> Tensor:
    """Stages 3-4 (with their downsamplers) applied to a stage-2 feature map."""
    c2 = cfg.stage_dims[1]
    if features.ndim != 4 or features.shape[1] != c2:
        raise DimensionError(f"stage-2 features must be N x {c2} x H x W, got {features.shape}")
    H, W = features.shape[2:]
    sub = cfg.total_stride // cfg.stride_at(2)
    if H % sub or W % sub:
        raise DimensionError(f"stage-2 feature map {H}x{W} is not divisible by the remaining stride {sub}")
    return run_stages(features, cfg, params, 2, 4, masked)


def global_pool_head(features: Tensor, params) -> Tensor:
    """Global average pool -> LayerNorm -> linear to class logits."""
    p = params.scope("head")
    pooled = mean(features, axis=(2, 3))
    pooled = layer_norm(pooled, p["norm.weight"], p["norm.bias"], eps=LN_EPS, axis=-1)
    return linear(pooled, p["fc.weight"], p["fc.bias"])
