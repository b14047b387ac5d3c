"""Command-line entry point: ``mednvc {synth,pretrain,finetune,eval,reconstruct}``.

Exit codes: 0 success, 1 runtime or training failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .blocks import EncoderConfig, encoder_forward
from .dataio import (COUPLINGS, CheckpointError, IngestionError, Sample, load_checkpoint, load_dataset,
                     normalize_records, save_checkpoint, split_samples, synth_dataset, to_uint8, transfer_encoder,
                     write_dataset, write_pnm)
from .diffcore import OptimizerState, Tensor, TrainingStepError, configure_threads, lr_at, no_grad
from .fusion import SENTINEL, FinetuneConfig, classify, finetune_epoch, init_classifier
from .maskae import (PretrainConfig, build_target, decoder_forward, derived_seed, init_pretrain_params,
                     pretrain_epoch, unpatchify)
from .masking import UNIT, generate_mask, upsample_grid
from .metrics import evaluate

log = logging.getLogger("mednvc")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
ENCODER_FIELDS = ("stage_dims", "stage_depths")


class ConfigError(ValueError):
    """Invalid or incompatible run configuration (exit code 2)."""


@dataclass(frozen=True)
class RunConfig:
    stage: str
    stage_dims: tuple = (32, 64, 128, 256)
    stage_depths: tuple = (1, 1, 2, 1)
    image_size: int = 224
    mask_ratio: float = 0.6
    fusion_blocks: int = 2
    num_heads: int = 4
    epochs: int = 50
    batch_size: int = 8
    peak_lr: float = 5e-4
    floor_lr: float = 5e-6
    warmup_epochs: int = 5
    modality_dropout_p: float = 0.2
    sentinel: float = SENTINEL
    seed: int = 0
    augment: bool = True
    holdout_fraction: float = 0.0
    manifest: Optional[str] = None
    init_from: Optional[str] = None
    checkpoint_out: Optional[str] = None
    log_out: Optional[str] = None

    def validate(self) -> None:
        """Build the stage config once so every field is checked before any compute."""
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"stage must be pretrain or finetune, got {self.stage!r}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError(f"holdout_fraction must lie in [0, 1), got {self.holdout_fraction}")
        try:
            self.stage_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(tuple(self.stage_dims), tuple(self.stage_depths), self.image_size)

    def stage_config(self):
        common = dict(encoder=self.encoder(), epochs=self.epochs, batch_size=self.batch_size, peak_lr=self.peak_lr,
                      floor_lr=self.floor_lr, warmup_epochs=self.warmup_epochs, seed=self.seed, augment=self.augment)
        if self.stage == "pretrain":
            return PretrainConfig(mask_ratio=self.mask_ratio, **common)
        return FinetuneConfig(fusion_blocks=self.fusion_blocks, num_heads=self.num_heads,
                              modality_dropout_p=self.modality_dropout_p, sentinel=self.sentinel, **common)

    def echo(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_dims"] = list(self.stage_dims)
        d["stage_depths"] = list(self.stage_depths)
        return d

    @classmethod
    def from_echo(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        for k in ("stage_dims", "stage_depths"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)


# -- argument parsing ----------------------------------------------------------------------

def _int_tuple(text: str) -> tuple:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if len(vals) != 4:
        raise argparse.ArgumentTypeError(f"expected 4 comma-separated integers, got {text!r}")
    return vals


def _add_model_args(p: argparse.ArgumentParser, epochs: int, peak_lr: float) -> None:
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", required=True, help="CSV loss log path")
    p.add_argument("--stage-dims", type=_int_tuple, default=(32, 64, 128, 256))
    p.add_argument("--stage-depths", type=_int_tuple, default=(1, 1, 2, 1))
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--peak-lr", type=float, default=peak_lr)
    p.add_argument("--floor-lr", type=float, default=None, help="defaults to peak-lr / 100")
    p.add_argument("--warmup-epochs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-augment", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mednvc", description="Masked-pretrained vision + lab-value classifier.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic coupled-modality dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coupling", choices=COUPLINGS, default="xor")
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining of the encoder")
    _add_model_args(p, epochs=50, peak_lr=5e-4)
    p.add_argument("--mask-ratio", type=float, default=0.6)

    p = sub.add_parser("finetune", help="supervised training of the fused classifier")
    _add_model_args(p, epochs=100, peak_lr=3e-4)
    p.add_argument("--init-from", default=None, help="pretraining checkpoint whose encoder is reused")
    p.add_argument("--fusion-blocks", type=int, default=2, help="0 gives the vision-only model")
    p.add_argument("--num-heads", type=int, default=4)
    p.add_argument("--modality-dropout-p", type=float, default=0.2)
    p.add_argument("--sentinel", type=float, default=SENTINEL)
    p.add_argument("--holdout-fraction", type=float, default=0.0,
                   help="patient-level stratified fraction of the manifest kept out of training")

    p = sub.add_parser("eval", help="evaluate a finetuned checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True, help="JSON report path")
    p.add_argument("--subset", choices=("all", "train", "holdout"), default="all",
                   help="which part of the checkpoint's split to evaluate")

    p = sub.add_parser("reconstruct", help="write original | masked | reconstruction triptychs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mask-ratio", type=float, default=None, help="defaults to the checkpoint's ratio")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=None)
    return parser


def config_from_args(args) -> RunConfig:
    floor = args.floor_lr if args.floor_lr is not None else args.peak_lr / 100.0
    extra = {}
    if args.command == "pretrain":
        extra["mask_ratio"] = args.mask_ratio
    else:
        extra.update(fusion_blocks=args.fusion_blocks, num_heads=args.num_heads,
                     modality_dropout_p=args.modality_dropout_p, sentinel=args.sentinel,
                     holdout_fraction=args.holdout_fraction, init_from=args.init_from)
    cfg = RunConfig(stage=args.command, stage_dims=tuple(args.stage_dims), stage_depths=tuple(args.stage_depths),
                    image_size=args.image_size, epochs=args.epochs, batch_size=args.batch_size,
                    peak_lr=args.peak_lr, floor_lr=floor, warmup_epochs=args.warmup_epochs, seed=args.seed,
                    augment=not args.no_augment, manifest=args.manifest, checkpoint_out=args.out,
                    log_out=args.log, **extra)
    cfg.validate()
    return cfg


# -- helpers ----------------------------------------------------------------------------------

def _stack(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32, copy=False)


def _labels(samples: Sequence[Sample]) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.int64)


def _write_log(path: str, rows: List[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "lr"])
        for epoch, loss, lr in rows:
            w.writerow([epoch, repr(float(loss)), repr(float(lr))])


def _check_encoder_compat(source: dict, cfg: RunConfig) -> None:
    mine = cfg.echo()
    for name in ENCODER_FIELDS:
        if source.get(name) != mine[name]:
            raise ConfigError(f"--init-from checkpoint has {name}={source.get(name)}, but this run uses {name}={mine[name]}")


def _load(manifest: str, image_size: int) -> List[Sample]:
    samples = load_dataset(manifest, image_size=image_size)
    if not samples:
        raise IngestionError(f"{manifest}: manifest has no samples")
    return samples


# -- commands ---------------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.n < 8 or args.n % 2:
        raise ConfigError(f"--n must be an even integer >= 8, got {args.n}")
    try:
        EncoderConfig(image_size=args.image_size)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    samples = synth_dataset(args.n, args.seed, args.coupling, size=args.image_size)
    path = write_dataset(samples, args.out_dir)
    print(f"wrote {len(samples)} samples to {path}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = config_from_args(args)
    pcfg = cfg.stage_config()
    images = _stack(_load(cfg.manifest, cfg.image_size))
    params = init_pretrain_params(pcfg)
    log.info("pretraining %d parameters on %d images", params.num_parameters(), len(images))
    state = OptimizerState()
    rows = []
    for epoch in range(pcfg.epochs):
        loss = pretrain_epoch(images, pcfg, params, state, epoch)
        rows.append((epoch, loss, lr_at(pcfg.schedule, epoch)))
    save_checkpoint(cfg.checkpoint_out, params, None, cfg.echo())
    _write_log(cfg.log_out, rows)
    print(f"pretrain: {pcfg.epochs} epochs, first loss {rows[0][1]:.4f}, final loss {rows[-1][1]:.4f}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = config_from_args(args)
    fcfg = cfg.stage_config()
    source = None
    if cfg.init_from:
        source = load_checkpoint(cfg.init_from)
        _check_encoder_compat(source.config, cfg)
    samples = _load(cfg.manifest, cfg.image_size)
    train, _ = split_samples(samples, cfg.holdout_fraction, cfg.seed)
    records, stats = normalize_records(train)
    params = init_classifier(fcfg)
    if source is not None:
        copied = transfer_encoder(source.params, params)
        log.info("transferred %d encoder tensors from %s", len(copied), cfg.init_from)
    log.info("finetuning %d parameters on %d samples", params.num_parameters(), len(train))
    images, labels = _stack(train), _labels(train)
    state = OptimizerState()
    rows = []
    for epoch in range(fcfg.epochs):
        loss = finetune_epoch(images, records, labels, fcfg, params, state, epoch)
        rows.append((epoch, loss, lr_at(fcfg.schedule, epoch)))
    save_checkpoint(cfg.checkpoint_out, params, stats, cfg.echo())
    _write_log(cfg.log_out, rows)
    print(f"finetune: {fcfg.epochs} epochs, final loss {rows[-1][1]:.4f}")
    return EXIT_OK


def _restore(path: str, stage: str):
    ckpt = load_checkpoint(path)
    try:
        cfg = RunConfig.from_echo(ckpt.config)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: stored config is unusable ({exc})") from None
    if cfg.stage != stage:
        raise ConfigError(f"{path} is a {cfg.stage} checkpoint; this command needs a {stage} checkpoint")
    return ckpt, cfg


def cmd_eval(args) -> int:
    ckpt, cfg = _restore(args.checkpoint, "finetune")
    if ckpt.norm_stats is None:
        raise CheckpointError(f"{args.checkpoint}: missing lab normalization statistics")
    fcfg = cfg.stage_config()
    samples = _load(args.manifest, cfg.image_size)
    if args.subset != "all":
        train, held = split_samples(samples, cfg.holdout_fraction, cfg.seed)
        samples = train if args.subset == "train" else held
        if not samples:
            raise ConfigError(f"the {args.subset} subset is empty")
    records, _ = normalize_records(samples, ckpt.norm_stats)
    labels = _labels(samples)
    rep = evaluate(lambda x, r: classify(x, r, fcfg, ckpt.params), _stack(samples), records, labels)
    if rep["auc"] is None:
        log.warning("evaluation set has a single class; AUC is undefined and reported as null")
    out = {k: rep[k] for k in ("acc", "auc", "tp", "tn", "fp", "fn", "n")}
    out["config_echo"] = cfg.echo()
    Path(args.report).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    auc_txt = "null" if rep["auc"] is None else f"{rep['auc']:.4f}"
    print(f"eval: n={rep['n']} acc={rep['acc']:.4f} auc={auc_txt}")
    return EXIT_OK


def reconstruct_triptych(image: np.ndarray, grid: np.ndarray, params, cfg: PretrainConfig) -> np.ndarray:
    """``H x 3W`` grayscale panel: original | masked (zero-filled) | reconstruction.

    Visible patches of the reconstruction panel show the original pixels;
    masked patches show the de-normalized prediction.
    """
    x = image[None].astype(np.float32)
    target = build_target(x)
    with no_grad():
        encoded = encoder_forward(Tensor(x), cfg.encoder, params, masked=grid[None])
        pred = decoder_forward(encoded, grid[None], params).data
    recon = unpatchify(target.denormalize(pred.astype(np.float64)), chans=x.shape[1])[0]
    pixel_mask = upsample_grid(grid, UNIT)[None]
    masked_view = np.where(pixel_mask, 0.0, image)
    recon = np.where(pixel_mask, np.clip(recon, 0.0, 1.0), image)
    panels = [p.mean(axis=0) for p in (image, masked_view, recon)]
    return to_uint8(np.concatenate(panels, axis=1))


def cmd_reconstruct(args) -> int:
    ckpt, cfg = _restore(args.checkpoint, "pretrain")
    pcfg = cfg.stage_config()
    ratio = pcfg.mask_ratio if args.mask_ratio is None else args.mask_ratio
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"--mask-ratio must lie in (0, 1), got {ratio}")
    samples = _load(args.manifest, cfg.image_size)
    if args.limit is not None:
        if args.limit < 1:
            raise ConfigError(f"--limit must be positive, got {args.limit}")
        samples = samples[:args.limit]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        mask = generate_mask(derived_seed(args.seed, 3, i), ratio, pcfg.encoder.grid_size)
        write_pnm(out_dir / f"recon_{i:05d}.pgm", reconstruct_triptych(s.image, mask.grid, ckpt.params, pcfg))
    print(f"wrote {len(samples)} triptychs to {out_dir}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "eval": cmd_eval, "reconstruct": cmd_reconstruct}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        configure_threads()
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"mednvc {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"mednvc {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestionError, CheckpointError, TrainingStepError) as exc:
        print(f"mednvc {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        # MED_NVC_THREADS and similar environment validation
        print(f"mednvc {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
