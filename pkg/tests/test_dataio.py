from __future__ import annotations

import csv
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from sklearn.linear_model import LogisticRegression

from mednvc.blocks import EncoderConfig
from mednvc.dataio import (FEATURES, MANIFEST_HEADER, NUM_FEATURES, CheckpointError, IngestionError, LabRecord,
                           NormStats, augment, flip_horizontal, load_checkpoint, load_dataset, normalize_records,
                           read_pnm, records_matrix, rotate, save_checkpoint, split_samples, synth_dataset,
                           transfer_encoder, write_dataset, write_pnm)
from mednvc.fusion import FinetuneConfig, init_classifier
from mednvc.maskae import PretrainConfig, init_pretrain_params


def _record(**kw):
    base = dict(crp=1.24, esr=8.0, joint=1, position=1, sex=0, age=62.0)
    base.update(kw)
    return LabRecord(**base)


# -- records -------------------------------------------------------------------------------------

def test_record_vector_has_fixed_length_and_order():
    r = _record(diabetes=1)
    v = r.to_vector()
    assert v.shape == (14,) and NUM_FEATURES == 14
    assert list(FEATURES[:5]) == ["crp", "esr", "joint_position", "sex", "age"]
    assert v[0] == 1.24 and v[1] == 8 and v[2] == 3 and v[4] == 62
    assert v[FEATURES.index("diabetes")] == 1


def test_record_validation():
    with pytest.raises(ValueError):
        _record(crp=-1.0)
    with pytest.raises(ValueError):
        _record(sex=2)
    with pytest.raises(ValueError):
        _record(age=float("nan"))


# -- PNM -------------------------------------------------------------------------------------------

def test_pnm_roundtrip(tmp_path, rng):
    gray = rng.integers(0, 256, (5, 7), dtype=np.uint8)
    color = rng.integers(0, 256, (4, 3, 3), dtype=np.uint8)
    write_pnm(tmp_path / "a.pgm", gray)
    write_pnm(tmp_path / "b.ppm", color)
    assert np.array_equal(read_pnm(tmp_path / "a.pgm"), gray)
    assert np.array_equal(read_pnm(tmp_path / "b.ppm"), color)


def test_pnm_with_comment(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([3, 250]))
    assert read_pnm(tmp_path / "c.pgm").tolist() == [[3, 250]]


def test_pnm_rejects_garbage(tmp_path):
    (tmp_path / "bad.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError):
        read_pnm(tmp_path / "bad.pgm")
    (tmp_path / "short.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(3))
    with pytest.raises(ValueError):
        read_pnm(tmp_path / "short.pgm")


# -- manifests -------------------------------------------------------------------------------------

def _write_manifest(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)


def _row(pid, img, label=0, rec=None):
    rec = rec if rec is not None else _record()
    return [pid, img, label] + rec.to_row()


def test_empty_manifest(tmp_path):
    (tmp_path / "m.csv").write_text("")
    assert load_dataset(tmp_path / "m.csv") == []
    _write_manifest(tmp_path / "h.csv", [])
    assert load_dataset(tmp_path / "h.csv") == []


def test_two_images_share_one_record(tmp_path, rng):
    for name in ("a.pgm", "b.pgm"):
        write_pnm(tmp_path / name, rng.integers(0, 256, (32, 32), dtype=np.uint8))
    blank = ["p1", "b.pgm", 1] + [""] * (len(MANIFEST_HEADER) - 3)
    _write_manifest(tmp_path / "m.csv", [_row("p1", "a.pgm", 1), blank])
    samples = load_dataset(tmp_path / "m.csv", image_size=64)
    assert len(samples) == 2
    assert samples[0].record == samples[1].record
    assert samples[0].image.shape == (3, 64, 64)
    assert np.array_equal(samples[0].image[0], samples[0].image[2])


def test_short_row_names_line(tmp_path, rng):
    write_pnm(tmp_path / "a.pgm", rng.integers(0, 256, (8, 8), dtype=np.uint8))
    _write_manifest(tmp_path / "m.csv", [_row("p1", "a.pgm"), _row("p2", "a.pgm")[:-1]])
    with pytest.raises(IngestionError, match="line 3"):
        load_dataset(tmp_path / "m.csv", image_size=32)


def test_missing_image_and_unknown_patient(tmp_path, rng):
    _write_manifest(tmp_path / "m.csv", [_row("p1", "nope.pgm")])
    with pytest.raises(IngestionError, match="line 2: missing image"):
        load_dataset(tmp_path / "m.csv")
    write_pnm(tmp_path / "a.pgm", rng.integers(0, 256, (8, 8), dtype=np.uint8))
    blank = ["ghost", "a.pgm", 0] + [""] * (len(MANIFEST_HEADER) - 3)
    _write_manifest(tmp_path / "m2.csv", [_row("p1", "a.pgm"), blank])
    with pytest.raises(IngestionError, match="line 3: unknown patient_id"):
        load_dataset(tmp_path / "m2.csv", image_size=32)


def test_bad_header_and_values(tmp_path, rng):
    (tmp_path / "m.csv").write_text("patient_id,image_path\n")
    with pytest.raises(IngestionError, match="line 1"):
        load_dataset(tmp_path / "m.csv")
    write_pnm(tmp_path / "a.pgm", rng.integers(0, 256, (8, 8), dtype=np.uint8))
    row = _row("p1", "a.pgm")
    row[MANIFEST_HEADER.index("sex")] = "3"
    _write_manifest(tmp_path / "m2.csv", [row])
    with pytest.raises(IngestionError, match="line 2"):
        load_dataset(tmp_path / "m2.csv", image_size=32)


def test_joint_accepts_names(tmp_path, rng):
    write_pnm(tmp_path / "a.pgm", rng.integers(0, 256, (8, 8), dtype=np.uint8))
    row = _row("p1", "a.pgm")
    row[MANIFEST_HEADER.index("joint")] = "hip"
    _write_manifest(tmp_path / "m.csv", [row])
    assert load_dataset(tmp_path / "m.csv", image_size=32)[0].record.joint == 0


def test_write_then_load_roundtrip(tmp_path):
    samples = synth_dataset(8, 3, size=64)
    manifest = write_dataset(samples, tmp_path)
    back = load_dataset(manifest, image_size=64)
    assert [s.patient_id for s in back] == [s.patient_id for s in samples]
    assert all(np.array_equal(a.image, b.image) for a, b in zip(samples, back))
    assert all(a.record == b.record and a.label == b.label for a, b in zip(samples, back))


# -- split and normalization -----------------------------------------------------------------------

def test_split_is_patient_level_and_stratified():
    samples = synth_dataset(40, 0, size=64)
    # duplicate a few patients to create multi-image patients
    samples = samples + samples[:6]
    train, ev = split_samples(samples, 0.2, seed=1)
    assert len(train) + len(ev) == len(samples)
    assert not {s.patient_id for s in train} & {s.patient_id for s in ev}
    labels = [s.label for s in ev]
    assert abs(labels.count(0) - labels.count(1)) <= 3


def test_normalization_properties():
    samples = synth_dataset(16, 0, size=64)
    z, stats_ = normalize_records(samples)
    assert np.abs(z.mean(axis=0)).max() < 1e-6
    raw = records_matrix(s.record for s in samples)
    assert np.abs(stats_.invert(z) - raw).max() < 1e-6
    const = raw.std(axis=0) == 0
    assert not z[:, const].any()


def test_normstats_roundtrip_dict():
    s = NormStats.fit(np.random.default_rng(0).random((5, 14)))
    t = NormStats.from_dict(s.to_dict())
    assert np.array_equal(s.mean, t.mean) and np.array_equal(s.std, t.std)


# -- augmentation ----------------------------------------------------------------------------------

class _FixedRng:
    def __init__(self, flip_draw, angle):
        self.flip_draw, self.angle = flip_draw, angle

    def random(self):
        return self.flip_draw

    def uniform(self, lo, hi):
        return self.angle


def test_augment_identity_and_flip(rng):
    img = rng.random((3, 32, 32)).astype(np.float32)
    assert np.array_equal(augment(img, _FixedRng(0.99, 0.0)), img)
    assert np.array_equal(flip_horizontal(flip_horizontal(img)), img)
    flipped = augment(img, _FixedRng(0.0, 0.0))
    assert np.float64(flipped).sum() == np.float64(img).sum()
    assert np.array_equal(flipped, img[..., ::-1])


def test_rotation_preserves_mass_and_range():
    yy, xx = np.mgrid[0:224, 0:224]
    blob = np.exp(-((yy - 112) ** 2 + (xx - 112) ** 2) / (2 * 30.0 ** 2))
    img = np.repeat(blob[None], 3, axis=0).astype(np.float32)
    for deg in (-15.0, 7.5, 15.0):
        out = rotate(img, deg)
        assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1
        assert abs(out.sum() / img.sum() - 1) < 0.02


def test_augment_output_range(rng):
    img = synth_dataset(8, 0, size=64)[0].image
    out = augment(img, rng)
    assert out.shape == img.shape and out.dtype == img.dtype
    assert out.min() >= 0 and out.max() <= 1


# -- synthetic data --------------------------------------------------------------------------------

def test_synth_validation():
    with pytest.raises(ValueError):
        synth_dataset(6, 0)
    with pytest.raises(ValueError):
        synth_dataset(9, 0)
    with pytest.raises(ValueError):
        synth_dataset(8, 0, coupling="and")


def test_synth_determinism_and_balance():
    a, b = synth_dataset(16, 5, size=64), synth_dataset(16, 5, size=64)
    assert all(np.array_equal(x.image, y.image) and x.record == y.record and x.label == y.label for x, y in zip(a, b))
    assert sum(s.label for s in a) == 8


def _image_features(samples):
    # quadrant brightness contrast: the generator's image bit lives in where the square is
    ims = np.stack([s.image[0] for s in samples])
    h = ims.shape[1] // 2
    return np.stack([ims[:, :h, :h].mean((1, 2)), ims[:, h:, h:].mean((1, 2)),
                     ims[:, :h, h:].mean((1, 2)), ims[:, h:, :h].mean((1, 2))], axis=1)


def _logistic_acc(X, y, Xt, yt):
    clf = LogisticRegression(max_iter=2000).fit(X, y)
    return clf.score(Xt, yt)


@pytest.mark.slow
def test_xor_single_modality_is_uninformative():
    train, test = synth_dataset(512, 11, size=64), synth_dataset(512, 12, size=64)
    y, yt = np.array([s.label for s in train]), np.array([s.label for s in test])
    num, stats_ = normalize_records(train)
    numt = normalize_records(test, stats_)[0]
    img, imgt = _image_features(train), _image_features(test)
    assert _logistic_acc(num, y, numt, yt) <= 0.65
    assert _logistic_acc(img, y, imgt, yt) <= 0.65
    # together the two modalities determine the label (sanity check on the generator)
    # the background brightens downwards, so compare each quadrant with its row neighbour
    image_bit = (imgt[:, 1] - imgt[:, 3]) > (imgt[:, 0] - imgt[:, 2])
    numeric_bit = numt[:, 0] > 0
    assert np.mean((image_bit ^ numeric_bit) == yt) >= 0.9


def test_vision_only_numeric_features_label_independent():
    samples = synth_dataset(512, 4, coupling="vision_only", size=64)
    y = np.array([s.label for s in samples])
    raw = records_matrix(s.record for s in samples)
    diff = raw[y == 1, 0].mean() - raw[y == 0, 0].mean()
    perm = np.random.default_rng(0)
    null = []
    for _ in range(500):
        yp = perm.permutation(y)
        null.append(raw[yp == 1, 0].mean() - raw[yp == 0, 0].mean())
    p_value = np.mean(np.abs(null) >= abs(diff))
    assert p_value > 0.05
    assert stats.ttest_ind(raw[y == 1, 1], raw[y == 0, 1]).pvalue > 0.05 / 13


def test_numeric_only_coupling_is_numeric_informative():
    samples = synth_dataset(256, 4, coupling="numeric_only", size=64)
    y = np.array([s.label for s in samples])
    raw = records_matrix(s.record for s in samples)
    assert raw[y == 1, 0].mean() - raw[y == 0, 0].mean() > 20


# -- checkpoints -----------------------------------------------------------------------------------

def _params():
    return init_pretrain_params(PretrainConfig(encoder=EncoderConfig(image_size=64)))


def test_checkpoint_roundtrip_bitwise(tmp_path):
    p = _params()
    stats_ = NormStats.fit(np.random.default_rng(0).random((4, 14)))
    cfg = {"stage": "pretrain", "seed": 3, "lr": 1e-4, "dims": [1, 2]}
    save_checkpoint(tmp_path / "c.nvc", p, stats_, cfg)
    ck = load_checkpoint(tmp_path / "c.nvc")
    assert list(ck.params) == list(p)
    assert all(ck.params[k].data.tobytes() == p[k].data.tobytes() for k in p)
    assert ck.config == cfg
    assert np.array_equal(ck.norm_stats.mean, stats_.mean) and np.array_equal(ck.norm_stats.std, stats_.std)


def test_checkpoint_layout(tmp_path):
    p = _params()
    save_checkpoint(tmp_path / "c.nvc", p, None, {})
    buf = (tmp_path / "c.nvc").read_bytes()
    assert buf[:4] == b"NVC1"
    (n,) = struct.unpack("<Q", buf[4:12])
    import json
    manifest = json.loads(buf[12:12 + n])
    first = manifest["tensors"][0]
    assert first["offset"] == 0 and first["dtype"] == "f32"
    payload = buf[12 + n:]
    arr = np.frombuffer(payload[:first["nbytes"]], dtype="<f4").reshape(first["shape"])
    assert np.array_equal(arr, p[first["name"]].data)


def test_checkpoint_errors(tmp_path):
    save_checkpoint(tmp_path / "c.nvc", _params(), None, {})
    buf = (tmp_path / "c.nvc").read_bytes()
    (tmp_path / "t.nvc").write_bytes(buf[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.nvc")
    (tmp_path / "m.nvc").write_bytes(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.nvc")
    (tmp_path / "v.nvc").write_bytes(buf.replace(b'"version":1', b'"version":9'))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.nvc")
    (tmp_path / "s.nvc").write_bytes(b"NVC1")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "s.nvc")


def test_stage_transfer(tmp_path):
    src = _params()
    save_checkpoint(tmp_path / "pre.nvc", src, None, {})
    loaded = load_checkpoint(tmp_path / "pre.nvc").params
    fresh = init_classifier(FinetuneConfig(encoder=EncoderConfig(image_size=64)))
    before = {k: v.data.copy() for k, v in fresh.items()}
    copied = transfer_encoder(loaded, fresh)
    assert set(copied) == {k for k in src if k.startswith("encoder.")}
    assert all(fresh[k].data.tobytes() == src[k].data.tobytes() for k in copied)
    assert not any(k.startswith("decoder.") for k in fresh)
    assert all(np.array_equal(fresh[k].data, before[k]) for k in fresh if not k.startswith("encoder."))


@given(st.lists(st.floats(-1e6, 1e6, width=32), min_size=1, max_size=30))
@settings(max_examples=30, deadline=None)
def test_checkpoint_roundtrip_property(tmp_path_factory, values):
    from mednvc.params import ModelParams
    p = ModelParams({"encoder.x": np.array(values, dtype=np.float32)})
    path = tmp_path_factory.mktemp("ck") / "p.nvc"
    save_checkpoint(path, p, None, {"n": len(values)})
    assert load_checkpoint(path).params["encoder.x"].data.tobytes() == p["encoder.x"].data.tobytes()
