"""Encoder pretraining: sparse encoder, lightweight decoder, patch-normalized masked MSE.

Masks are drawn per image and per epoch. Augmentation is applied before the
reconstruction target is extracted, so prediction and target always describe
the same view of the image. Mask tokens enter at the decoder input only.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import masking
from .blocks import EncoderConfig, convnext_v2_block, encoder_forward, init_block, pointwise
from .dataio import augment
from .diffcore import (DimensionError, LrSchedule, NonFiniteError, OptimizerState, Tensor,
                       TrainingStepError, add, lion_step, lr_at, mul, reshape)
from .masking import UNIT, PatchMask, generate_mask, stack_masks
from .params import ModelParams, trunc_normal, zeros

log = logging.getLogger(__name__)

DECODER_DIM = 512
TARGET_EPS = 1e-6

# Re-exported so the pretraining stage reads as one module.
masked_conv2d = masking.masked_conv2d
mask_propagate = masking.mask_propagate


@dataclass(frozen=True)
class PretrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    epochs: int = 50
    batch_size: int = 8
    mask_ratio: float = 0.6
    peak_lr: float = 5e-4
    floor_lr: float = 5e-6
    warmup_epochs: int = 5
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in (0, 1) for pretraining, got {self.mask_ratio}")
        self.schedule  # validates the learning-rate fields

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.warmup_epochs, self.peak_lr, self.floor_lr, self.epochs)


# -- decoder -------------------------------------------------------------------------

def init_decoder(enc_dim: int, rng: np.random.Generator, dim: int = DECODER_DIM,
                 unit: int = UNIT, chans: int = 3) -> ModelParams:
    p = ModelParams()
    p["decoder.mask_token"] = trunc_normal(rng, (enc_dim,))
    p["decoder.proj.weight"] = trunc_normal(rng, (dim, enc_dim))
    p["decoder.proj.bias"] = zeros(dim)
    for k, v in init_block(dim, rng).items():
        p[f"decoder.block.{k}"] = v
    p["decoder.pred.weight"] = trunc_normal(rng, (unit * unit * chans, dim))
    p["decoder.pred.bias"] = zeros(unit * unit * chans)
    return p


def decoder_forward(encoded: Tensor, mask: Union[PatchMask, np.ndarray], params) -> Tensor:
    """Fill masked cells with the mask token, project to 512, one dense block, predict pixels.

    Returns ``N x (UNIT*UNIT*chans) x gh x gw``: one flattened pixel patch per cell.
    """
    p = params.scope("decoder")
    grid = mask.grid if isinstance(mask, PatchMask) else np.asarray(mask, dtype=bool)
    token = p["mask_token"]
    C = token.shape[0]
    if encoded.ndim != 4 or encoded.shape[1] != C:
        raise DimensionError(f"decoder input must be N x {C} x gh x gw, got {encoded.shape}")
    if grid.shape[-2:] != encoded.shape[2:]:
        raise DimensionError(f"mask grid {grid.shape[-2:]} != encoded map {encoded.shape[2:]} (axes 2, 3)")
    vis = masking.visibility(grid, *encoded.shape[2:], encoded.dtype)
    x = add(mul(encoded, vis), mul(reshape(token, (1, C, 1, 1)), 1.0 - vis))
    x = pointwise(x, p["proj.weight"], p["proj.bias"])
    x = convnext_v2_block(x, p.scope("block"))
    return pointwise(x, p["pred.weight"], p["pred.bias"])


# -- reconstruction target and loss ------------------------------------------------------

def patchify(images: np.ndarray, unit: int = UNIT) -> np.ndarray:
    """``N x C x H x W`` -> ``N x (C*unit*unit) x gh x gw``; channel index is ``c*unit^2 + y*unit + x``."""
    N, C, H, W = images.shape
    if H % unit or W % unit:
        raise DimensionError(f"image {H}x{W} is not divisible by the mask unit {unit}")
    gh, gw = H // unit, W // unit
    x = images.reshape(N, C, gh, unit, gw, unit).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(x.reshape(N, C * unit * unit, gh, gw))


def unpatchify(patches: np.ndarray, chans: int = 3, unit: int = UNIT) -> np.ndarray:
    N, _, gh, gw = patches.shape
    x = patches.reshape(N, chans, unit, unit, gh, gw).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(x.reshape(N, chans, gh * unit, gw * unit))


@dataclass
class ReconTarget:
    patches: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def denormalize(self, normalized: np.ndarray) -> np.ndarray:
        return normalized * self.std + self.mean


def build_target(images: np.ndarray, unit: int = UNIT, eps: float = TARGET_EPS) -> ReconTarget:
    """Standardize every mask-unit patch (population std, clamped at ``eps``)."""
    raw = patchify(np.asarray(images, dtype=np.float64), unit)
    mu = raw.mean(axis=1, keepdims=True)
    sd = np.maximum(raw.std(axis=1, keepdims=True), eps)
    dtype = images.dtype if images.dtype in (np.float32, np.float64) else np.float32
    return ReconTarget(((raw - mu) / sd).astype(dtype), mu, sd)


def recon_loss(pred: Tensor, target: ReconTarget, mask: Union[PatchMask, np.ndarray]) -> Tensor:
    """Mean squared error over masked cells only (each cell averaged over its pixels)."""
    grid = mask.grid if isinstance(mask, PatchMask) else np.asarray(mask, dtype=bool)
    if pred.shape != target.patches.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.patches.shape}")
    N, P, gh, gw = pred.shape
    grid = np.broadcast_to(grid, (N, gh, gw)) if grid.ndim == 2 else grid
    if grid.shape != (N, gh, gw):
        raise DimensionError(f"mask shape {grid.shape} does not match prediction cells {(N, gh, gw)}")
    count = int(grid.sum())
    if count == 0:
        raise ValueError("recon_loss is undefined without masked cells")
    sel = np.broadcast_to(grid[:, None], pred.shape)
    diff = np.where(sel, pred.data - target.patches, 0.0).astype(pred.dtype, copy=False)
    scale = 1.0 / (count * P)
    loss = np.asarray(np.sum(diff[sel] ** 2) * scale, dtype=pred.dtype)

    def backward(g):
        return ((2.0 * scale * g) * diff,)

    return Tensor._from_op(loss, (pred,), backward, "recon_loss")


# -- training -------------------------------------------------------------------------

def derived_seed(*parts: int) -> int:
    """Stable 32-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def pretrain_loss(images: np.ndarray, masks: Sequence[PatchMask], cfg: PretrainConfig, params) -> Tensor:
    grid = stack_masks(masks)
    target = build_target(images)
    x = Tensor(images.astype(params["encoder.stem.conv.weight"].dtype, copy=False))
    encoded = encoder_forward(x, cfg.encoder, params, upto_stage=4, masked=grid)
    pred = decoder_forward(encoded, grid, params)
    return recon_loss(pred, target, grid)


def pretrain_epoch(images: np.ndarray, cfg: PretrainConfig, params: ModelParams, opt_state: OptimizerState,
                   epoch: int, lr: Optional[float] = None) -> float:
    """One pass over ``images`` (``N x 3 x H x W`` in [0, 1]); returns the epoch-mean loss.

    Parameters and ``opt_state`` are updated in place. ``lr`` overrides the schedule.
    """
    n = len(images)
    if n == 0:
        raise ValueError("pretraining needs at least one image")
    rate = lr_at(cfg.schedule, epoch) if lr is None else lr
    order = np.random.default_rng(derived_seed(cfg.seed, 0, epoch)).permutation(n)
    total = 0.0
    for start in range(0, n, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        batch = images[idx]
        if cfg.augment:
            batch = np.stack([augment(img, np.random.default_rng(derived_seed(cfg.seed, 2, epoch, i)))
                              for img, i in zip(batch, idx)])
        masks = [generate_mask(derived_seed(cfg.seed, 1, epoch, int(i)), cfg.mask_ratio, cfg.encoder.grid_size)
                 for i in idx]
        params.zero_grad()
        try:
            loss = pretrain_loss(batch, masks, cfg, params)
            loss.backward()
        except NonFiniteError as exc:
            raise TrainingStepError(f"pretraining epoch {epoch}, batch at {start}: {exc}") from exc
        lion_step(params, opt_state, rate)
        total += float(loss.data) * len(idx)
    params.zero_grad()
    mean_loss = total / n
    log.info("pretrain epoch %d lr %.3g loss %.5f", epoch, rate, mean_loss)
    return mean_loss


def init_pretrain_params(cfg: PretrainConfig) -> ModelParams:
    from .blocks import init_encoder
    rng = np.random.default_rng(derived_seed(cfg.seed, 100))
    params = init_encoder(cfg.encoder, rng)
    params.update(init_decoder(cfg.encoder.stage_dims[3], rng))
    return params
