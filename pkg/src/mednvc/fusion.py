"""Full-data learning: lab-vector tokens, one-way cross-attention, classification.

The image branch runs encoder stages 1-2, then a stack of cross-attention
blocks in which image positions are queries and the 14 lab tokens are keys
and values, then encoder stages 3-4 and the pooled classifier head. Only the
image stream is updated by the fusion blocks; the lab tokens pass through
untouched.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .blocks import EncoderConfig, encoder_forward, global_pool_head, init_encoder, init_head, resume_from_stage3
from .dataio import NUM_FEATURES, augment
from .diffcore import (DimensionError, LrSchedule, NonFiniteError, OptimizerState, Tensor, TrainingStepError,
                       add, gelu, layer_norm, linear, lion_step, lr_at, matmul, mul, reshape, softmax, transpose)
from .maskae import derived_seed
from .params import ModelParams, ones, trunc_normal, zeros

log = logging.getLogger(__name__)

SENTINEL = -10.0
LN_EPS = 1e-6


@dataclass(frozen=True)
class FinetuneConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion_blocks: int = 2
    num_heads: int = 4
    epochs: int = 100
    batch_size: int = 8
    peak_lr: float = 3e-4
    floor_lr: float = 3e-6
    warmup_epochs: int = 5
    modality_dropout_p: float = 0.2
    sentinel: float = SENTINEL
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.fusion_blocks < 0:
            raise ValueError(f"fusion_blocks must be >= 0, got {self.fusion_blocks}")
        if self.num_heads < 1 or self.encoder.stage_dims[1] % self.num_heads:
            raise ValueError(
                f"num_heads={self.num_heads} must divide the stage-2 width {self.encoder.stage_dims[1]}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.modality_dropout_p <= 1.0:
            raise ValueError(f"modality_dropout_p must lie in [0, 1], got {self.modality_dropout_p}")
        if not math.isfinite(self.sentinel):
            raise ValueError("sentinel must be finite")
        self.schedule

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.warmup_epochs, self.peak_lr, self.floor_lr, self.epochs)

    @property
    def width(self) -> int:
        return self.encoder.stage_dims[1]


@dataclass
class NumericTokens:
    tokens: Tensor
    source: np.ndarray


# -- parameters -----------------------------------------------------------------------

def init_fusion(cfg: FinetuneConfig, rng: np.random.Generator) -> ModelParams:
    C = cfg.width
    p = ModelParams()
    if cfg.fusion_blocks == 0:
        return p
    p["fusion.embed.direction"] = trunc_normal(rng, (NUM_FEATURES, C))
    p["fusion.embed.position"] = trunc_normal(rng, (NUM_FEATURES, C))
    p["fusion.embed.fc1.weight"] = trunc_normal(rng, (C, C))
    p["fusion.embed.fc1.bias"] = zeros(C)
    p["fusion.embed.fc2.weight"] = trunc_normal(rng, (C, C))
    p["fusion.embed.fc2.bias"] = zeros(C)
    for b in range(cfg.fusion_blocks):
        pre = f"fusion.blocks.{b}"
        p[f"{pre}.norm_q.weight"] = ones(C)
        p[f"{pre}.norm_q.bias"] = zeros(C)
        p[f"{pre}.norm_kv.weight"] = ones(C)
        p[f"{pre}.norm_kv.bias"] = zeros(C)
        for w in ("wq", "wk", "wv", "wo"):
            p[f"{pre}.{w}"] = trunc_normal(rng, (C, C))
    return p


def init_classifier(cfg: FinetuneConfig) -> ModelParams:
    """Freshly initialized encoder, fusion and head parameters."""
    rng = np.random.default_rng(derived_seed(cfg.seed, 200))
    params = init_encoder(cfg.encoder, rng)
    params.update(init_fusion(cfg, rng))
    params.update(init_head(cfg.encoder.stage_dims[3], rng))
    return params


# -- lab tokens -----------------------------------------------------------------------

def embed_lab(records, params) -> NumericTokens:
    """Map each normalized lab value to a token: ``MLP(value * e_i + p_i)``.

    ``records`` is ``N x 14`` (or a single 14-vector). The two-layer GELU MLP
    is shared by all features; ``e_i`` and ``p_i`` are per-feature vectors.
    """
    p = params.scope("fusion.embed")
    direction = p["direction"]
    src = records.data if isinstance(records, Tensor) else np.asarray(records)
    if src.ndim == 1:
        src = src[None]
    if src.ndim != 2 or src.shape[1] != NUM_FEATURES:
        raise ValueError(f"lab records must have {NUM_FEATURES} values, got shape {src.shape}")
    if isinstance(records, Tensor):
        rec = records if records.ndim == 2 else reshape(records, src.shape)
    else:
        rec = Tensor(src.astype(direction.dtype))
    h = add(mul(reshape(rec, (rec.shape[0], NUM_FEATURES, 1)), direction), p["position"])
    h = gelu(linear(h, p["fc1.weight"], p["fc1.bias"]))
    return NumericTokens(linear(h, p["fc2.weight"], p["fc2.bias"]), src)


# -- cross-attention --------------------------------------------------------------------

def cross_attention_block(img_feats: Tensor, num_tokens: NumericTokens, p, num_heads: int,
                          key_mask: Optional[np.ndarray] = None, inspect: Optional[dict] = None) -> Tensor:
    """Image positions attend to lab tokens; residual update of the image map only.

    ``key_mask`` (``T`` or ``N x T`` booleans, True = keep) hides tokens from
    every query. When ``inspect`` is a dict it receives the attention weights
    (``N x heads x HW x T``), the pre-projection context and the values.
    """
    tokens = num_tokens.tokens
    if img_feats.ndim != 4:
        raise DimensionError(f"image features must be NCHW, got {img_feats.shape}")
    N, C, H, W = img_feats.shape
    if tokens.ndim != 3 or tokens.shape[0] != N or tokens.shape[2] != C:
        raise DimensionError(
            f"token shape {tokens.shape} does not match image batch {N} / channels {C} (axis 1)")
    if C % num_heads:
        raise DimensionError(f"channels {C} not divisible by {num_heads} heads")
    T = tokens.shape[1]
    L = H * W
    dk = C // num_heads

    q_in = transpose(reshape(img_feats, (N, C, L)), (0, 2, 1))
    q_in = layer_norm(q_in, p["norm_q.weight"], p["norm_q.bias"], eps=LN_EPS, axis=-1)
    kv_in = layer_norm(tokens, p["norm_kv.weight"], p["norm_kv.bias"], eps=LN_EPS, axis=-1)

    def heads(x: Tensor, n: int) -> Tensor:
        return transpose(reshape(x, (N, n, num_heads, dk)), (0, 2, 1, 3))

    q = heads(linear(q_in, p["wq"]), L)
    k = heads(linear(kv_in, p["wk"]), T)
    v = heads(linear(kv_in, p["wv"]), T)
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    if key_mask is not None:
        keep = np.broadcast_to(np.asarray(key_mask, dtype=bool).reshape(-1, 1, 1, T) if np.ndim(key_mask) == 2
                               else np.asarray(key_mask, dtype=bool).reshape(1, 1, 1, T), (N, 1, 1, T))
        if not keep.any(axis=-1).all():
            raise ValueError("key_mask hides every token")
        scores = add(scores, np.where(keep, 0.0, -1e30).astype(scores.dtype))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (N, L, C))
    out = linear(ctx, p["wo"])
    out = reshape(transpose(out, (0, 2, 1)), (N, C, H, W))
    if inspect is not None:
        inspect["attention"] = attn.data
        inspect["context"] = ctx.data
        inspect["values"] = v.data
    return add(img_feats, out)


def fusion_stack(img_feats: Tensor, num_tokens: NumericTokens, params, num_blocks: int, num_heads: int) -> Tensor:
    """Apply ``num_blocks`` cross-attention blocks; each block's output is the next block's query source."""
    if num_blocks < 1:
        raise ValueError("fusion_stack needs at least one block")
    x = img_feats
    for b in range(num_blocks):
        x = cross_attention_block(x, num_tokens, params.scope(f"fusion.blocks.{b}"), num_heads)
    return x


# -- modality dropout ---------------------------------------------------------------------

def modality_dropout(records: np.ndarray, p: float, sentinel: float = SENTINEL, rng=None) -> np.ndarray:
    """With probability ``p`` replace a whole lab vector by ``sentinel`` (each row drawn independently)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1], got {p}")
    records = np.asarray(records)
    rows = records[None] if records.ndim == 1 else records
    rng = rng if rng is not None else np.random.default_rng()
    drop = rng.random(len(rows)) < p
    out = np.where(drop[:, None], np.asarray(sentinel, dtype=rows.dtype), rows)
    return out[0] if records.ndim == 1 else out


# -- classification ------------------------------------------------------------------------

def classify(images, records, cfg: FinetuneConfig, params) -> Tensor:
    """Logits ``N x 2``: stages 1-2 -> fusion with lab tokens -> stages 3-4 -> pooled head."""
    x = images if isinstance(images, Tensor) else Tensor(
        np.asarray(images, dtype=params["encoder.stem.conv.weight"].dtype))
    feats = encoder_forward(x, cfg.encoder, params, upto_stage=2)
    if cfg.fusion_blocks:
        tokens = embed_lab(records, params)
        if tokens.tokens.shape[0] != x.shape[0]:
            raise DimensionError(f"{tokens.tokens.shape[0]} lab records for {x.shape[0]} images")
        feats = fusion_stack(feats, tokens, params, cfg.fusion_blocks, cfg.num_heads)
    return global_pool_head(resume_from_stage3(feats, cfg.encoder, params), params)


def ce_loss(logits: Tensor, labels) -> Tensor:
    """Batch-mean cross-entropy with a stable log-sum-exp."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} do not match")
    K = logits.shape[1]
    if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"labels must be integers in [0, {K}), got {labels}")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    N = len(labels)
    loss = np.asarray(-logp[np.arange(N), labels].mean(), dtype=z.dtype)

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(N), labels] -= 1.0
        return (grad * (g / N),)

    return Tensor._from_op(loss, (logits,), backward, "ce_loss")


def finetune_epoch(images: np.ndarray, records: np.ndarray, labels: np.ndarray, cfg: FinetuneConfig,
                   params: ModelParams, opt_state: OptimizerState, epoch: int,
                   lr: Optional[float] = None) -> float:
    """One supervised pass; ``records`` are already normalized. Returns the epoch-mean loss."""
    n = len(images)
    if n == 0 or len(records) != n or len(labels) != n:
        raise ValueError(f"need matching nonempty images/records/labels, got {n}/{len(records)}/{len(labels)}")
    rate = lr_at(cfg.schedule, epoch) if lr is None else lr
    order = np.random.default_rng(derived_seed(cfg.seed, 10, epoch)).permutation(n)
    total = 0.0
    for start in range(0, n, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        batch = images[idx]
        if cfg.augment:
            batch = np.stack([augment(img, np.random.default_rng(derived_seed(cfg.seed, 11, epoch, i)))
                              for img, i in zip(batch, idx)])
        rec = modality_dropout(records[idx], cfg.modality_dropout_p, cfg.sentinel,
                               np.random.default_rng(derived_seed(cfg.seed, 12, epoch, start)))
        params.zero_grad()
        try:
            loss = ce_loss(classify(batch, rec, cfg, params), labels[idx])
            loss.backward()
        except NonFiniteError as exc:
            raise TrainingStepError(f"finetune epoch {epoch}, batch at {start}: {exc}") from exc
        lion_step(params, opt_state, rate)
        total += float(loss.data) * len(idx)
    params.zero_grad()
    mean_loss = total / n
    log.info("finetune epoch %d lr %.3g loss %.5f", epoch, rate, mean_loss)
    return mean_loss


# -- numeric-only baseline ---------------------------------------------------------------------

def init_numeric_mlp(hidden: int, rng: np.random.Generator, num_classes: int = 2) -> ModelParams:
    p = ModelParams()
    dims = [NUM_FEATURES, hidden, hidden, num_classes]
    for i in range(3):
        p[f"numeric.fc{i + 1}.weight"] = trunc_normal(rng, (dims[i + 1], dims[i]), std=1.0 / math.sqrt(dims[i]))
        p[f"numeric.fc{i + 1}.bias"] = zeros(dims[i + 1])
    return p


def numeric_forward(records, params) -> Tensor:
    """Three-layer GELU MLP on the lab vector alone (the numeric-only baseline)."""
    p = params.scope("numeric")
    x = records if isinstance(records, Tensor) else Tensor(np.asarray(records, dtype=p["fc1.weight"].dtype))
    x = gelu(linear(x, p["fc1.weight"], p["fc1.bias"]))
    x = gelu(linear(x, p["fc2.weight"], p["fc2.bias"]))
    return linear(x, p["fc3.weight"], p["fc3.bias"])


def train_numeric_baseline(records: np.ndarray, labels: np.ndarray, epochs: int = 100, hidden: int = 64,
                           batch_size: int = 8, peak_lr: float = 3e-4, warmup_epochs: int = 5,
                           seed: int = 0) -> ModelParams:
    """Fit the numeric-only MLP with the same optimizer and schedule family as the fused model.

    ``records`` are normalized lab vectors (N x 14). No modality dropout: the
    lab vector is this model's only input.
    """
    n = len(records)
    if n == 0 or len(labels) != n:
        raise ValueError(f"need matching nonempty records/labels, got {n}/{len(labels)}")
    schedule = LrSchedule(warmup_epochs, peak_lr, peak_lr / 100.0, epochs)
    params = init_numeric_mlp(hidden, np.random.default_rng(derived_seed(seed, 300)))
    state = OptimizerState()
    labels = np.asarray(labels)
    for epoch in range(epochs):
        order = np.random.default_rng(derived_seed(seed, 20, epoch)).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            params.zero_grad()
            ce_loss(numeric_forward(records[idx], params), labels[idx]).backward()
            lion_step(params, state, lr_at(schedule, epoch))
    params.zero_grad()
    return params
