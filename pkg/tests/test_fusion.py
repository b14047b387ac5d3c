from __future__ import annotations

import math

import numpy as np
import pytest

from mednvc.blocks import EncoderConfig, global_pool_head, encoder_forward, resume_from_stage3
from mednvc.dataio import NUM_FEATURES
from mednvc.diffcore import DimensionError, OptimizerState, Tensor, add, gradcheck, mul, ops, precision
from mednvc.fusion import (FinetuneConfig, NumericTokens, ce_loss, classify, cross_attention_block, embed_lab,
                           finetune_epoch, fusion_stack, init_classifier, init_fusion, init_numeric_mlp,
                           modality_dropout, numeric_forward, train_numeric_baseline)
from mednvc.params import ModelParams

SMALL = EncoderConfig(stage_dims=(8, 16, 16, 16), stage_depths=(1, 1, 1, 1), image_size=64)


def _fusion_params(C=16, blocks=2, heads=4, seed=0, dtype=np.float64, scale=0.5):
    enc = EncoderConfig(stage_dims=(8, C, 16, 16), stage_depths=(1, 1, 1, 1), image_size=64)
    cfg = FinetuneConfig(encoder=enc, fusion_blocks=blocks, num_heads=heads)
    rng = np.random.default_rng(seed)
    p = ModelParams()
    for k, v in init_fusion(cfg, rng).items():
        arr = v.data.astype(dtype)
        if arr.ndim == 2:
            arr = rng.standard_normal(arr.shape) * scale
        p[k] = arr
    return p, cfg


def _records(rng, n=2):
    return rng.standard_normal((n, NUM_FEATURES))


# -- embedding -----------------------------------------------------------------------------------

def test_embed_lab_shape_and_zero_mlp(rng):
    p, _ = _fusion_params()
    p["fusion.embed.fc2.weight"] = np.zeros((16, 16))
    p["fusion.embed.fc2.bias"] = np.arange(16.0)
    toks = embed_lab(np.zeros((3, NUM_FEATURES)), p)
    assert isinstance(toks, NumericTokens)
    assert toks.tokens.shape == (3, NUM_FEATURES, 16)
    assert np.array_equal(toks.tokens.data, np.broadcast_to(np.arange(16.0), (3, NUM_FEATURES, 16)))


def test_embed_lab_feature_permutation_symmetry(rng):
    p, _ = _fusion_params()
    rec = _records(rng, 1)
    base = embed_lab(rec, p).tokens.data
    perm = np.arange(NUM_FEATURES)
    perm[[2, 9]] = perm[[9, 2]]
    q = ModelParams({k: Tensor(v.data.copy()) for k, v in p.items()})
    q["fusion.embed.direction"] = p["fusion.embed.direction"].data[perm]
    q["fusion.embed.position"] = p["fusion.embed.position"].data[perm]
    swapped = embed_lab(rec[:, perm], q).tokens.data
    assert np.allclose(swapped, base[:, perm], atol=1e-12)


def test_embed_lab_wrong_length():
    p, _ = _fusion_params()
    with pytest.raises(ValueError):
        embed_lab(np.zeros(13), p)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_embed_lab_gradcheck(seed):
    p, _ = _fusion_params(seed=seed)
    rng = np.random.default_rng(seed)
    with precision("float64"):
        rec = Tensor(_records(rng))
        proj = rng.standard_normal((2, NUM_FEATURES, 16))
        inputs = {"rec": rec, **{k: v for k, v in p.items() if k.startswith("fusion.embed")}}
        res = gradcheck(lambda: ops.sum(mul(embed_lab(rec, p).tokens, proj)), inputs, max_per_input=80, seed=seed)
    assert res.ok(), res


# -- cross-attention -----------------------------------------------------------------------------

def _img(rng, n=2, C=16, H=4):
    return Tensor(rng.standard_normal((n, C, H, H)))


def test_attention_rows_sum_to_one(rng):
    p, cfg = _fusion_params()
    info = {}
    with precision("float64"):
        cross_attention_block(_img(rng), embed_lab(_records(rng), p), p.scope("fusion.blocks.0"), 4, inspect=info)
    att = info["attention"]
    assert att.shape == (2, 4, 16, NUM_FEATURES)
    assert np.abs(att.sum(axis=-1) - 1).max() < 1e-6


def test_single_token_attention_returns_value(rng):
    p, _ = _fusion_params()
    keep = np.zeros(NUM_FEATURES, dtype=bool)
    keep[5] = True
    info = {}
    with precision("float64"):
        cross_attention_block(_img(rng), embed_lab(_records(rng), p), p.scope("fusion.blocks.0"), 4,
                              key_mask=keep, inspect=info)
    assert np.allclose(info["attention"][..., 5], 1.0)
    # context (N x L x C) equals token 5's value vector (heads concatenated) at every query
    v5 = info["values"][:, :, 5, :].reshape(2, 1, 16)
    assert np.allclose(info["context"], np.broadcast_to(v5, info["context"].shape), atol=1e-12)


def test_zero_wo_is_pure_residual(rng):
    p, _ = _fusion_params()
    p["fusion.blocks.0.wo"] = np.zeros((16, 16))
    x = _img(rng)
    out = cross_attention_block(x, embed_lab(_records(rng), p), p.scope("fusion.blocks.0"), 4)
    assert np.array_equal(out.data, x.data)


def test_channel_mismatch(rng):
    p, _ = _fusion_params()
    with pytest.raises(DimensionError):
        cross_attention_block(_img(rng, C=8), embed_lab(_records(rng), p), p.scope("fusion.blocks.0"), 4)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_cross_attention_gradcheck(seed):
    p, _ = _fusion_params(seed=seed)
    rng = np.random.default_rng(seed + 5)
    with precision("float64"):
        x = _img(rng)
        tok = Tensor(rng.standard_normal((2, NUM_FEATURES, 16)))
        proj = rng.standard_normal((2, 16, 4, 4))
        blk = p.scope("fusion.blocks.0")
        inputs = {"x": x, "tok": tok, **{k: v for k, v in p.items() if k.startswith("fusion.blocks.0")}}
        res = gradcheck(lambda: ops.sum(mul(cross_attention_block(x, NumericTokens(tok, None), blk, 4), proj)),
                        inputs, max_per_input=60, seed=seed)
    assert res.ok(), res


def test_fusion_stack_contracts(rng):
    p, _ = _fusion_params()
    x = _img(rng)
    toks = embed_lab(_records(rng), p)
    before = toks.tokens.data.copy()
    one = cross_attention_block(x, toks, p.scope("fusion.blocks.0"), 4).data
    assert np.array_equal(fusion_stack(x, toks, p, 1, 4).data, one)
    p["fusion.blocks.1.wo"] = np.zeros((16, 16))
    assert np.array_equal(fusion_stack(x, toks, p, 2, 4).data, one)
    assert toks.tokens.data.tobytes() == before.tobytes()
    with pytest.raises(ValueError):
        fusion_stack(x, toks, p, 0, 4)


def test_head_count_must_divide_width():
    with pytest.raises(ValueError):
        FinetuneConfig(encoder=SMALL, num_heads=3)


# -- modality dropout ----------------------------------------------------------------------------

def test_modality_dropout_extremes(rng):
    rec = _records(rng, 1)[0]
    assert np.array_equal(modality_dropout(rec, 0.0, rng=rng), rec)
    assert np.array_equal(modality_dropout(rec, 1.0, rng=rng), np.full(NUM_FEATURES, -10.0))
    with pytest.raises(ValueError):
        modality_dropout(rec, 1.5)


def test_modality_dropout_frequency():
    rng = np.random.default_rng(0)
    rows = np.ones((10_000, NUM_FEATURES))
    dropped = (modality_dropout(rows, 0.2, rng=rng) == -10.0).all(axis=1)
    assert 0.185 <= dropped.mean() <= 0.215


# -- classification ------------------------------------------------------------------------------

def test_classify_zero_params_gives_head_bias(rng):
    cfg = FinetuneConfig(encoder=SMALL)
    params = init_classifier(cfg)
    for k in params:
        params[k] = np.zeros(params[k].shape, dtype=np.float32)
    params["head.fc.bias"] = np.array([0.5, -0.25], dtype=np.float32)
    imgs = rng.random((3, 3, 64, 64)).astype(np.float32)
    out = classify(imgs, _records(rng, 3), cfg, params).data
    assert np.array_equal(out, np.tile([0.5, -0.25], (3, 1)).astype(np.float32))


def test_classify_zero_wo_equals_vision_pipeline(rng):
    cfg = FinetuneConfig(encoder=SMALL)
    params = init_classifier(cfg)
    for b in range(cfg.fusion_blocks):
        params[f"fusion.blocks.{b}.wo"] = np.zeros((16, 16), dtype=np.float32)
    imgs = rng.random((2, 3, 64, 64)).astype(np.float32)
    fused = classify(imgs, _records(rng), cfg, params).data
    x = Tensor(imgs)
    vision = global_pool_head(resume_from_stage3(encoder_forward(x, SMALL, params, 2), SMALL, params), params).data
    assert np.max(np.abs(fused - vision)) <= 1e-6
    novis = FinetuneConfig(encoder=SMALL, fusion_blocks=0)
    assert np.max(np.abs(classify(imgs, _records(rng), novis, params).data - vision)) <= 1e-6


def test_sentinel_makes_output_record_independent(rng):
    cfg = FinetuneConfig(encoder=SMALL, modality_dropout_p=1.0)
    params = init_classifier(cfg)
    imgs = rng.random((2, 3, 64, 64)).astype(np.float32)
    a = classify(imgs, modality_dropout(_records(rng), 1.0, rng=rng), cfg, params).data
    b = classify(imgs, modality_dropout(_records(rng) * 5, 1.0, rng=rng), cfg, params).data
    assert np.array_equal(a, b)


def test_classify_gradcheck_reduced_resolution():
    enc = EncoderConfig(stage_dims=(4, 8, 8, 8), stage_depths=(1, 1, 1, 1), image_size=64)
    cfg = FinetuneConfig(encoder=enc, fusion_blocks=1, num_heads=2)
    with precision("float64"):
        params = init_classifier(cfg)
        rng = np.random.default_rng(0)
        for k in params:
            if params[k].ndim >= 2:
                params[k] = params[k].data * 20
        imgs = rng.random((1, 3, 64, 64))
        rec = _records(rng, 1)
        picks = ["encoder.stem.conv.weight", "encoder.stages.1.0.pwconv1.weight", "fusion.blocks.0.wq",
                 "fusion.embed.direction", "encoder.stages.3.0.dwconv.weight", "head.fc.weight"]
        proj = np.array([[1.0, -0.5]])
        res = gradcheck(lambda: ops.sum(mul(classify(imgs, rec, cfg, params), proj)),
                        {k: params[k] for k in picks}, max_per_input=15)
    assert res.max_rel_err < 1e-2, res


# -- loss ----------------------------------------------------------------------------------------

def test_ce_loss_values():
    with precision("float64"):
        assert ce_loss(Tensor(np.zeros((1, 2))), [1]).item() == pytest.approx(math.log(2))
        assert ce_loss(Tensor(np.array([[1000.0, 0.0]])), [0]).item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        ce_loss(Tensor(np.zeros((1, 2))), [2])
    with pytest.raises(ValueError):
        ce_loss(Tensor(np.zeros((1, 2))), [0.5])


def test_ce_loss_closed_form_gradient(rng):
    z = rng.standard_normal((5, 2)) * 3
    y = np.array([0, 1, 1, 0, 1])
    with precision("float64"):
        t = Tensor(z, requires_grad=True)
        ce_loss(t, y).backward()
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    expected = (p - np.eye(2)[y]) / 5
    assert np.abs(t.grad - expected).max() < 1e-9


def test_ce_shift_invariance(rng):
    z = rng.standard_normal((4, 2))
    y = np.array([0, 1, 0, 1])
    with precision("float64"):
        a, b = Tensor(z, requires_grad=True), Tensor(z + 7.0, requires_grad=True)
        la, lb = ce_loss(a, y), ce_loss(b, y)
        la.backward()
        lb.backward()
    assert la.item() == pytest.approx(lb.item(), abs=1e-12)
    assert np.allclose(a.grad, b.grad, atol=1e-12)
    assert np.array_equal(z.argmax(1), (z + 7).argmax(1))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ce_loss_gradcheck(seed):
    rng = np.random.default_rng(seed)
    with precision("float64"):
        z = Tensor(rng.standard_normal((6, 2)))
        y = rng.integers(0, 2, 6)
        res = gradcheck(lambda: ce_loss(z, y), {"z": z})
    assert res.ok(), res


# -- training --------------------------------------------------------------------------------------

def _tiny_set(rng, n=8):
    imgs = rng.random((n, 3, 64, 64)).astype(np.float32)
    return imgs, _records(rng, n), np.arange(n) % 2


def test_finetune_zero_lr_keeps_parameters(rng):
    cfg = FinetuneConfig(encoder=SMALL, epochs=2, batch_size=4)
    params = init_classifier(cfg)
    before = {k: v.data.copy() for k, v in params.items()}
    finetune_epoch(*_tiny_set(rng), cfg, params, OptimizerState(), 0, lr=0.0)
    assert all(np.array_equal(before[k], params[k].data) for k in params)


def test_finetune_determinism(rng):
    cfg = FinetuneConfig(encoder=SMALL, epochs=2, batch_size=4)
    data = _tiny_set(rng)
    out = []
    for _ in range(2):
        params, state = init_classifier(cfg), OptimizerState()
        losses = [finetune_epoch(*data, cfg, params, state, e) for e in range(2)]
        out.append((losses, b"".join(v.data.tobytes() for v in params.values())))
    assert out[0] == out[1]


def test_finetune_input_validation(rng):
    cfg = FinetuneConfig(encoder=SMALL)
    imgs, rec, y = _tiny_set(rng)
    with pytest.raises(ValueError):
        finetune_epoch(imgs, rec[:3], y, cfg, init_classifier(cfg), OptimizerState(), 0)


def test_numeric_mlp_shapes_and_gradcheck():
    with precision("float64"):
        p = init_numeric_mlp(8, np.random.default_rng(0))
        rec = Tensor(_records(np.random.default_rng(1), 3))
        assert numeric_forward(rec, p).shape == (3, 2)
        res = gradcheck(lambda: ce_loss(numeric_forward(rec, p), [0, 1, 1]), dict(p.items()))
    assert res.ok(), res


def test_add_accepts_arrays(rng):
    # key masks are added as plain arrays; make sure that path keeps gradients
    with precision("float64"):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        ops.sum(add(x, np.ones(3))).backward()
    assert np.array_equal(x.grad, np.ones(3))


def test_numeric_baseline_learns_numeric_coupling():
    from mednvc.dataio import normalize_records, synth_dataset
    train, held = synth_dataset(128, 0, "numeric_only", size=32), synth_dataset(64, 1, "numeric_only", size=32)
    rec, stats = normalize_records(train)
    rec_e, _ = normalize_records(held, stats)
    params = train_numeric_baseline(rec, np.array([s.label for s in train]), epochs=15)
    pred = numeric_forward(rec_e, params).data.argmax(axis=1)
    assert np.mean(pred == np.array([s.label for s in held])) >= 0.9
