"""Lab-record schema, manifest/image ingestion, synthetic data, augmentation, checkpoints.

The lab vector has 14 entries in this fixed order::

    crp, esr, joint_position, sex, age, hypertension, diabetes,
    rheumatoid_arthritis, anemia, osteoporosis, cerebral_infarction,
    hypoalbuminemia, hypothyroidism, liver_disease

The record lists 15 fields: the ``joint`` (hip=0, knee=1) and ``position``
(0/1) columns of the manifest are merged into one ``joint_position`` code
``2 * joint + position`` so that the vector keeps 14 entries.
"""
from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .diffcore import Tensor
from .params import ModelParams

PathLike = Union[str, os.PathLike]

FLAG_FIELDS = ("hypertension", "diabetes", "rheumatoid_arthritis", "anemia", "osteoporosis",
               "cerebral_infarction", "hypoalbuminemia", "hypothyroidism", "liver_disease")
FEATURES = ("crp", "esr", "joint_position", "sex", "age") + FLAG_FIELDS
NUM_FEATURES = len(FEATURES)
MANIFEST_HEADER = ("patient_id", "image_path", "label", "crp", "esr", "joint", "position", "sex", "age") + FLAG_FIELDS
RECORD_COLUMNS = MANIFEST_HEADER[3:]
NORM_EPS = 1e-6
COUPLINGS = ("xor", "vision_only", "numeric_only")


class IngestionError(ValueError):
    """A manifest row or image file could not be ingested."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed, truncated or of an unknown version."""


# -- records --------------------------------------------------------------------------

@dataclass(frozen=True)
class LabRecord:
    crp: float
    esr: float
    joint: int
    position: int
    sex: int
    age: float
    hypertension: int = 0
    diabetes: int = 0
    rheumatoid_arthritis: int = 0
    anemia: int = 0
    osteoporosis: int = 0
    cerebral_infarction: int = 0
    hypoalbuminemia: int = 0
    hypothyroidism: int = 0
    liver_disease: int = 0

    def __post_init__(self):
        for name in ("crp", "esr", "age"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be a finite nonnegative number, got {v}")
        for name in ("joint", "position", "sex") + FLAG_FIELDS:
            if getattr(self, name) not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1, got {getattr(self, name)!r}")

    @property
    def joint_position(self) -> int:
        return 2 * self.joint + self.position

    def to_vector(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in FEATURES], dtype=np.float64)

    def to_row(self) -> List[str]:
        return [_fmt(getattr(self, c)) for c in RECORD_COLUMNS]


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def records_matrix(records: Iterable[LabRecord]) -> np.ndarray:
    rows = [r.to_vector() for r in records]
    return np.stack(rows) if rows else np.zeros((0, NUM_FEATURES))


@dataclass(eq=False)
class Sample:
    image: np.ndarray
    record: LabRecord
    label: int
    patient_id: str
    image_path: Optional[str] = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be 3 x H x W, got {self.image.shape}")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValueError("image values must lie in [0, 1]")


# -- PGM / PPM ------------------------------------------------------------------------

def _pnm_tokens(buf: bytes, count: int) -> Tuple[List[int], int]:
    """Read ``count`` whitespace-separated header integers, skipping ``#`` comments."""
    out, pos = [], 2
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ValueError("malformed PNM header")
        out.append(int(buf[start:pos]))
    return out, pos + 1  # exactly one whitespace byte precedes the raster


def read_pnm(path: PathLike) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) with maxval 255 as ``uint8`` (H x W or H x W x 3)."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    (w, h, maxval), start = _pnm_tokens(buf, 3)
    if maxval != 255:
        raise ValueError(f"{path}: maxval {maxval} unsupported (need 255)")
    chans = 1 if magic == b"P5" else 3
    need = w * h * chans
    raster = buf[start:start + need]
    if len(raster) != need:
        raise ValueError(f"{path}: raster truncated ({len(raster)} of {need} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(h, w) if chans == 1 else arr.reshape(h, w, 3)


def write_pnm(path: PathLike, arr: np.ndarray) -> None:
    """Write ``uint8`` H x W as PGM or H x W x 3 as PPM."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write array of shape {arr.shape} as PGM/PPM")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255.0)


def load_image(path: PathLike, size: int = 224) -> np.ndarray:
    """Load a PGM/PPM as a ``3 x size x size`` float32 image in [0, 1]."""
    arr = from_uint8(read_pnm(path))
    chw = np.repeat(arr[None], 3, axis=0) if arr.ndim == 2 else arr.transpose(2, 0, 1)
    h, w = chw.shape[1:]
    if (h, w) != (size, size):
        chw = ndimage.zoom(chw, (1, size / h, size / w), order=1, mode="nearest", grid_mode=True)
        chw = np.clip(chw, 0.0, 1.0)
    return np.ascontiguousarray(chw, dtype=np.float32)


# -- manifests ------------------------------------------------------------------------

def _parse_record(row: Dict[str, str], lineno: int) -> Optional[LabRecord]:
    raw = [row[c].strip() for c in RECORD_COLUMNS]
    if all(v == "" for v in raw):
        return None
    if any(v == "" for v in raw):
        missing = [c for c, v in zip(RECORD_COLUMNS, raw) if v == ""]
        raise IngestionError(f"line {lineno}: missing values for {', '.join(missing)}")
    vals = dict(zip(RECORD_COLUMNS, raw))
    joint = vals["joint"].lower()
    vals["joint"] = {"hip": "0", "knee": "1"}.get(joint, joint)
    try:
        kw = {}
        for c in RECORD_COLUMNS:
            v = float(vals[c])
            if c in ("crp", "esr", "age"):
                kw[c] = v
            else:
                if not v.is_integer():
                    raise ValueError(f"{c} must be 0 or 1, got {vals[c]!r}")
                kw[c] = int(v)
        return LabRecord(**kw)
    except ValueError as exc:
        raise IngestionError(f"line {lineno}: {exc}") from None


def load_dataset(manifest_path: PathLike, image_size: int = 224) -> List[Sample]:
    """Read a manifest CSV and its images.

    Several rows may share a ``patient_id`` (several images per patient). A
    row may leave all record columns empty to reuse the record given on
    another row of the same patient; conflicting records or labels for one
    patient are rejected.
    """
    manifest_path = Path(manifest_path)
    text = manifest_path.read_text(encoding="utf-8")
    if not text.strip():
        return []
    reader = csv.reader(text.splitlines())
    header = tuple(h.strip() for h in next(reader))
    if header != MANIFEST_HEADER:
        raise IngestionError(f"line 1: manifest header must be {','.join(MANIFEST_HEADER)}")
    rows = []
    for lineno, values in enumerate(reader, start=2):
        if not values or all(not v.strip() for v in values):
            continue
        if len(values) != len(MANIFEST_HEADER):
            raise IngestionError(
                f"line {lineno}: expected {len(MANIFEST_HEADER)} columns, got {len(values)}")
        row = dict(zip(MANIFEST_HEADER, values))
        try:
            label = int(row["label"])
        except ValueError:
            raise IngestionError(f"line {lineno}: label must be 0 or 1, got {row['label']!r}") from None
        if label not in (0, 1):
            raise IngestionError(f"line {lineno}: label must be 0 or 1, got {label}")
        pid = row["patient_id"].strip()
        if not pid:
            raise IngestionError(f"line {lineno}: empty patient_id")
        rows.append((lineno, pid, row["image_path"].strip(), label, _parse_record(row, lineno)))

    records: Dict[str, Tuple[LabRecord, int]] = {}
    for lineno, pid, _, label, rec in rows:
        if rec is None:
            continue
        if pid in records and records[pid][0] != rec:
            raise IngestionError(f"line {lineno}: conflicting lab record for patient {pid!r}")
        records.setdefault(pid, (rec, label))

    samples = []
    for lineno, pid, img_path, label, _ in rows:
        if pid not in records:
            raise IngestionError(f"line {lineno}: unknown patient_id {pid!r} (no lab record)")
        rec, rec_label = records[pid]
        if label != rec_label:
            raise IngestionError(f"line {lineno}: label {label} disagrees with patient {pid!r}")
        full = (manifest_path.parent / img_path) if not os.path.isabs(img_path) else Path(img_path)
        if not full.is_file():
            raise IngestionError(f"line {lineno}: missing image file {img_path!r}")
        try:
            image = load_image(full, image_size)
        except ValueError as exc:
            raise IngestionError(f"line {lineno}: {exc}") from None
        samples.append(Sample(image, rec, label, pid, img_path))
    return samples


def write_dataset(samples: Sequence[Sample], out_dir: PathLike, manifest_name: str = "manifest.csv") -> Path:
    """Write each image as PGM (PPM when channels differ) plus a manifest CSV."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / manifest_name
    with open(manifest, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for i, s in enumerate(samples):
            px = to_uint8(s.image)
            gray = bool((px[0] == px[1]).all() and (px[0] == px[2]).all())
            rel = f"images/{i:05d}_{s.patient_id}.{'pgm' if gray else 'ppm'}"
            write_pnm(out_dir / rel, px[0] if gray else px.transpose(1, 2, 0))
            w.writerow([s.patient_id, rel, s.label] + s.record.to_row())
    return manifest


# -- splitting and normalization ------------------------------------------------------------

def split_samples(samples: Sequence[Sample], eval_fraction: float = 0.2, seed: int = 0):
    """Patient-level split stratified by label; returns ``(train, eval)`` in input order."""
    if not 0.0 <= eval_fraction < 1.0:
        raise ValueError(f"eval_fraction must lie in [0, 1), got {eval_fraction}")
    patients: Dict[str, int] = {}
    for s in samples:
        patients.setdefault(s.patient_id, s.label)
    rng = np.random.default_rng(seed)
    held = set()
    for label in (0, 1):
        ids = sorted(p for p, lab in patients.items() if lab == label)
        k = int(round(len(ids) * eval_fraction))
        if k:
            held.update(ids[i] for i in rng.permutation(len(ids))[:k])
    train = [s for s in samples if s.patient_id not in held]
    ev = [s for s in samples if s.patient_id in held]
    return train, ev


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, vectors: np.ndarray) -> "NormStats":
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[1] != NUM_FEATURES or len(vectors) == 0:
            raise ValueError(f"need a nonempty N x {NUM_FEATURES} matrix, got {vectors.shape}")
        return cls(vectors.mean(axis=0), np.maximum(vectors.std(axis=0), NORM_EPS))

    def apply(self, vectors: np.ndarray) -> np.ndarray:
        return (np.asarray(vectors, dtype=np.float64) - self.mean) / self.std

    def invert(self, normalized: np.ndarray) -> np.ndarray:
        return np.asarray(normalized, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


def normalize_records(samples: Sequence[Sample], stats: Optional[NormStats] = None):
    """Z-score the lab vectors; stats are fitted on ``samples`` unless supplied.

    Returns ``(normalized N x 14 array, stats)``.
    """
    raw = records_matrix(s.record for s in samples)
    if stats is None:
        if not len(raw):
            raise ValueError("cannot fit normalization statistics on an empty training split")
        stats = NormStats.fit(raw)
    return stats.apply(raw), stats


# -- augmentation ---------------------------------------------------------------------------

def flip_horizontal(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[..., ::-1])


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the centre with bilinear resampling and zero padding."""
    out = ndimage.rotate(image, degrees, axes=(-1, -2), reshape=False, order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


def augment(image: np.ndarray, rng, flip_p: float = 0.5, max_degrees: float = 15.0) -> np.ndarray:
    """Random horizontal flip, then rotation by a uniform angle in [-max, +max] degrees."""
    if rng.random() < flip_p:
        image = flip_horizontal(image)
    angle = float(rng.uniform(-max_degrees, max_degrees))
    if angle != 0.0:
        image = rotate(image, angle)
    return image


# -- synthetic data -------------------------------------------------------------------------

def render_synthetic_image(bit: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Grayscale ``size x size`` uint8 image: smooth background plus a bright square.

    The square sits in the top-left quadrant for ``bit=0`` and the bottom-right
    quadrant for ``bit=1``; horizontal flips keep it in the same (upper/lower) half.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    phase = rng.uniform(0.0, 2 * np.pi)
    img = 0.15 + 0.45 * yy + 0.08 * np.sin(2 * np.pi * 3.0 * xx + phase)
    side = size // 4
    half = size // 2
    lo = size // 16
    r0 = int(rng.integers(lo, half - side - lo + 1))
    c0 = int(rng.integers(lo, half - side - lo + 1))
    if bit:
        r0, c0 = r0 + half, c0 + half
    img[r0:r0 + side, c0:c0 + side] += 0.3
    img += rng.normal(0.0, 0.015, size=img.shape)
    return to_uint8(img)


def synthetic_record(bit: int, rng: np.random.Generator) -> LabRecord:
    """Lab record whose CRP and ESR are shifted upwards when ``bit=1``."""
    crp = abs(rng.normal(6.0, 4.0)) + 30.0 * bit + rng.normal(0.0, 2.0)
    esr = abs(rng.normal(15.0, 6.0)) + 30.0 * bit
    flags = {f: int(rng.random() < 0.15) for f in FLAG_FIELDS}
    return LabRecord(crp=round(max(crp, 0.0), 2), esr=float(round(esr)), joint=int(rng.integers(2)),
                     position=int(rng.integers(2)), sex=int(rng.integers(2)),
                     age=float(rng.integers(45, 86)), **flags)


def synth_dataset(n: int, seed: int, coupling: str = "xor", size: int = 224) -> List[Sample]:
    """Balanced synthetic dataset with a hidden image bit and a hidden numeric bit.

    ``xor``: label = image bit XOR numeric bit (neither modality alone is
    informative); ``vision_only``: label = image bit; ``numeric_only``:
    label = numeric bit. The uninformative bit is balanced within each class.
    """
    if n < 8 or n % 2:
        raise ValueError(f"n must be an even integer >= 8, got {n}")
    if coupling not in COUPLINGS:
        raise ValueError(f"coupling must be one of {COUPLINGS}, got {coupling!r}")
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n // 2)
    free = np.zeros(n, dtype=int)
    for lab in (0, 1):
        idx = np.flatnonzero(labels == lab)
        free[idx] = rng.permutation(np.arange(len(idx)) % 2)
    order = rng.permutation(n)
    labels, free = labels[order], free[order]

    samples = []
    for i in range(n):
        lab, f = int(labels[i]), int(free[i])
        if coupling == "xor":
            bv, bn = f, lab ^ f
        elif coupling == "vision_only":
            bv, bn = lab, f
        else:
            bv, bn = f, lab
        img = from_uint8(render_synthetic_image(bv, size, rng))
        rec = synthetic_record(bn, rng)
        image = np.repeat(img[None], 3, axis=0)
        samples.append(Sample(image, rec, lab, f"syn{seed}-{i:05d}"))
    return samples


# -- checkpoints -----------------------------------------------------------------------------

MAGIC = b"NVC1"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    params: ModelParams
    config: dict = field(default_factory=dict)
    norm_stats: Optional[NormStats] = None


def save_checkpoint(path: PathLike, params: ModelParams, norm_stats: Optional[NormStats], config: dict) -> None:
    """Write ``NVC1 | u64 LE manifest length | JSON manifest | float32 LE payload``."""
    table, chunks, offset = [], [], 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        chunks.append(arr.tobytes())
        table.append({"name": name, "shape": list(arr.shape), "dtype": "f32",
                      "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": config,
        "norm_stats": norm_stats.to_dict() if norm_stats is not None else None,
        "payload_nbytes": offset,
        "tensors": table,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path: PathLike) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes (not an NVC1 checkpoint)")
    (n,) = struct.unpack("<Q", buf[4:12])
    if 12 + n > len(buf):
        raise CheckpointError(f"{path}: manifest length {n} exceeds file size")
    try:
        manifest = json.loads(buf[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unknown checkpoint version {manifest.get('version')!r}")
    payload = buf[12 + n:]
    if len(payload) != manifest.get("payload_nbytes"):
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes but the manifest declares {manifest.get('payload_nbytes')}")
    params = ModelParams()
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        off = entry["offset"]
        if entry.get("dtype") != "f32" or entry["nbytes"] != nbytes or off < 0 or off + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor {entry.get('name')!r} does not fit the payload")
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape)
        params[entry["name"]] = Tensor(arr.astype(np.float32))
    stats = NormStats.from_dict(manifest["norm_stats"]) if manifest.get("norm_stats") else None
    return Checkpoint(params, manifest.get("config") or {}, stats)


def transfer_encoder(source: ModelParams, target: ModelParams) -> List[str]:
    """Copy every ``encoder.*`` tensor of ``source`` into ``target``; returns the names copied."""
    copied = []
    for name, t in source.items():
        if not name.startswith("encoder."):
            continue
        if name not in target:
            raise KeyError(f"target model has no parameter {name!r}")
        if target[name].shape != t.shape:
            raise ValueError(f"shape mismatch for {name!r}: {t.shape} vs {target[name].shape}")
        target[name] = Tensor(t.data.copy())
        copied.append(name)
    return copied
