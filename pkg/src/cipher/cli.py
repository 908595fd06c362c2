"""``cipher`` command line: data prep, GAN and diffusion training, generation, fine-tuning, detection, evaluation.

Usage::

    cipher <command> [--config FILE] [--key value ...]

Every ``--section.key value`` pair overrides the config file. Outputs go
under ``<runs>/<run.name>/`` where ``<runs>`` is ``$CIPHER_RUNS_DIR`` or
``paths.runs``.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import dataio
from .checkpoint import CheckpointError, file_digest
from .config import ConfigError, RunConfig, load_config
from .dataio import AugmentConfig, LabeledDataset, build_balanced_dataset, load_directory
from .detector import DetectionScore, Detector, FinetuneConfig, detect, ensemble_score, finetune
from .diffusion import DiffusionTrainConfig, UNetSpec, generate_fakes, train_diffusion
from .evalharness import emit_table, evaluate_cross, load_registry
from .progan import GanTrainConfig, train_progressive
from .toydata import make_toy_faces

log = logging.getLogger("cipher")

COMMANDS = ("prepare", "train-gan", "train-diffusion", "generate", "finetune", "detect", "evaluate", "toy-data")


class UsageError(RuntimeError):
    pass


class Run:
    """Paths and shared state for one run directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        root = os.environ.get("CIPHER_RUNS_DIR") or cfg["paths.runs"]
        self.dir = Path(root) / cfg["run.name"]

    @property
    def manifest(self) -> Path:
        return self.dir / "data" / "manifest.tsv"

    @property
    def disc_ckpt(self) -> Path:
        return self.dir / "gan" / "discriminator.safetensors"

    @property
    def unet_ckpt(self) -> Path:
        return self.dir / "diffusion" / "unet.safetensors"

    @property
    def fakes_dir(self) -> Path:
        return self.dir / "fakes"

    @property
    def detector_ckpt(self) -> Path:
        return self.dir / "detector" / f"{self.cfg['ft.checkpoint']}.safetensors"

    def require(self, path: Path, produced_by: str) -> Path:
        if not path.exists():
            raise UsageError(f"missing upstream artifact {path}; run `cipher {produced_by}` for this run first")
        return path

    def device(self) -> torch.device:
        dev = self.cfg["run.device"]
        if dev == "auto":
            dev = "cuda" if torch.cuda.is_available() else "cpu"
        return torch.device(dev)

    def autocast(self):
        if self.cfg["run.precision"] == "fp16" and self.device().type == "cuda":
            return torch.autocast("cuda", dtype=torch.float16)
        return contextlib.nullcontext()


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _setup_logging(run: Run) -> logging.Handler:
    run.dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(run.dir / "events.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    if root.level > logging.INFO or root.level == logging.NOTSET:
        root.setLevel(logging.INFO)
    return handler


def _progress(prefix: str):
    def report(row: dict) -> None:
        log.info("%s %s", prefix, " ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return report


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(run: Run, args) -> int:
    cfg = run.cfg
    real = cfg["paths.real"]
    if not real:
        raise UsageError("no real image directory; pass --real DIR or set paths.real")
    fake = cfg["paths.fake"] or str(run.fakes_dir)
    for label, d in (("real", real), ("fake", fake)):
        if not Path(d).is_dir():
            raise UsageError(f"{label} image directory not found: {d}")
    ds = build_balanced_dataset(real, fake, cfg["data.n_per_class"], cfg["data.split"], cfg["data.seed"], run.manifest)
    cfg.freeze(run.manifest.parent / "config.cfg")
    counts = ds.class_counts()
    print(f"wrote {run.manifest} ({len(ds)} items: {counts[0]} real, {counts[1]} fake)")
    return 0


def _gan_config(cfg: RunConfig) -> GanTrainConfig:
    stages = cfg["gan.stages"]
    channels = cfg["gan.channels"]
    if len(channels) < stages:
        raise ConfigError(f"gan.channels lists {len(channels)} widths but gan.stages is {stages}")
    return GanTrainConfig(
        channels=list(channels[:stages]), latent_dim=cfg["gan.latent_dim"], batch_size=cfg["gan.batch_size"],
        lr=cfg["gan.lr"], iters_per_stage=cfg["gan.iters_per_stage"], fade_iters=cfg["gan.fade_iters"],
        gd_ratio=cfg["gan.gd_ratio"], seed=cfg["gan.seed"], checkpoint_every=cfg["gan.checkpoint_every"],
    )


def cmd_train_gan(run: Run, args) -> int:
    cfg = run.cfg
    gcfg = _gan_config(cfg)
    src = cfg["paths.gan_data"] or cfg["paths.real"]
    if not src:
        raise UsageError("no GAN training images; set paths.gan_data or paths.real")
    res = cfg["data.resolution"]
    if 4 * 2 ** (gcfg.stages - 1) != res:
        raise ConfigError(f"gan.stages={gcfg.stages} ends at {4 * 2 ** (gcfg.stages - 1)}px but data.resolution is {res}")
    _seed_everything(gcfg.seed)
    images = load_directory(src, res)
    log.info("training GAN on %d images from %s", len(images), src)
    out = run.dir / "gan"
    cfg.freeze(out / "config.cfg")
    data = dataio.infinite_batches(images, gcfg.batch_size, gcfg.seed)
    t0 = time.time()
    with run.autocast():
        result = train_progressive(gcfg, data, out, resume=args.resume, progress=_progress("gan"))
    print(f"GAN trained in {time.time() - t0:.0f}s: {result.d_steps} D steps, {result.g_steps} G steps -> {run.disc_ckpt}")
    return 0


def _diffusion_config(cfg: RunConfig) -> DiffusionTrainConfig:
    spec = UNetSpec(
        base_channels=cfg["diff.base_channels"], channel_multipliers=tuple(cfg["diff.multipliers"]),
        attention_resolutions=tuple(cfg["diff.attention"]), resolution=cfg["data.resolution"],
        num_res_blocks=cfg["diff.num_res_blocks"], emb_dim=cfg["diff.emb_dim"],
    )
    return DiffusionTrainConfig(
        iterations=cfg["diff.iterations"], batch_size=cfg["diff.batch_size"], lr=cfg["diff.lr"], T=cfg["diff.T"],
        beta_start=cfg["diff.beta_start"], beta_end=cfg["diff.beta_end"], seed=cfg["diff.seed"], unet=spec,
        grad_checkpoint=cfg["diff.grad_checkpoint"], checkpoint_every=cfg["diff.checkpoint_every"],
        sample_every=cfg["diff.sample_every"], sample_steps=min(cfg["ddim.steps"], cfg["diff.T"]),
    )


def cmd_train_diffusion(run: Run, args) -> int:
    cfg = run.cfg
    dcfg = _diffusion_config(cfg)
    src = cfg["paths.diffusion_data"] or cfg["paths.real"]
    if not src:
        raise UsageError("no diffusion training images; set paths.diffusion_data or paths.real")
    _seed_everything(dcfg.seed)
    images = load_directory(src, cfg["data.resolution"])
    log.info("training diffusion model on %d images from %s", len(images), src)
    out = run.dir / "diffusion"
    cfg.freeze(out / "config.cfg")
    data = dataio.infinite_batches(images, dcfg.batch_size, dcfg.seed)
    t0 = time.time()
    with run.autocast():
        result = train_diffusion(dcfg, data, out, resume=args.resume, progress=_progress("diffusion"),
                                 device=run.device())
    tail = np.mean(result.losses[-100:]) if result.losses else float("nan")
    print(f"diffusion trained in {time.time() - t0:.0f}s (final loss ~{tail:.4f}) -> {run.unet_ckpt}")
    return 0


def cmd_generate(run: Run, args) -> int:
    cfg = run.cfg
    ckpt = run.require(run.unet_ckpt, "train-diffusion")
    _seed_everything(cfg["ddim.seed"])
    t0 = time.time()
    out = generate_fakes(ckpt, run.fakes_dir, cfg["ddim.n"], cfg["ddim.steps"], cfg["ddim.seed"],
                         cfg["ddim.batch_size"], run.device())
    cfg.freeze(out / "config.cfg")
    print(f"generated {cfg['ddim.n']} fakes in {time.time() - t0:.0f}s -> {out}")
    return 0


def _finetune_config(cfg: RunConfig) -> FinetuneConfig:
    return FinetuneConfig(
        epochs=cfg["ft.epochs"], lr=cfg["ft.lr"], batch_size=cfg["ft.batch_size"],
        label_smoothing=cfg["ft.label_smoothing"], dropout=cfg["ft.dropout"],
        augment=AugmentConfig(cfg["augment.hflip_prob"], cfg["augment.jitter"]), seed=cfg["ft.seed"],
        freeze_backbone=cfg["ft.freeze_backbone"],
    )


def cmd_finetune(run: Run, args) -> int:
    cfg = run.cfg
    disc = run.require(run.disc_ckpt, "train-gan")
    manifest = run.require(run.manifest, "prepare")
    fcfg = _finetune_config(cfg)
    _seed_everything(fcfg.seed)
    ds = LabeledDataset.load_manifest(manifest)
    out = run.dir / "detector"
    cfg.freeze(out / "config.cfg")
    t0 = time.time()
    result = finetune(disc, ds, fcfg, resolution=cfg["data.resolution"], out_dir=out)
    for row in result.history:
        log.info("finetune epoch=%d loss=%.5f val_acc=%.4f", row["epoch"], row["train_loss"], row["val_acc"])
    print(f"fine-tuned {fcfg.epochs} epochs in {time.time() - t0:.0f}s; best val acc "
          f"{result.best.meta.get('val_acc', float('nan')):.4f} (epoch {result.best.meta.get('epoch')}) -> {out}")
    return 0


def _detectors(run: Run, paths: Sequence[str] | None) -> list[Detector]:
    if paths:
        return [Detector.load(run.require(Path(p), "finetune")) for p in paths]
    return [Detector.load(run.require(run.detector_ckpt, "finetune"))]


def cmd_detect(run: Run, args) -> int:
    cfg = run.cfg
    if not args.images:
        raise UsageError("detect needs at least one image path")
    dets = _detectors(run, args.detector)
    res = dets[0].resolution
    if any(d.resolution != res for d in dets):
        raise UsageError("ensemble members must share one input resolution")
    paths, rows = [], []
    for p in args.images:
        try:
            rows.append(dataio.load_image(p, res))
            paths.append(p)
        except (OSError, dataio.RejectedInputError) as exc:
            raise UsageError(str(exc)) from exc
    images = torch.stack(rows)
    probs = ensemble_score([d.fake_probability(images) for d in dets], cfg["ensemble.weights"] or None)
    threshold = cfg["detect.threshold"]
    for p, prob in zip(paths, probs.tolist()):
        score = DetectionScore.from_probability(prob, threshold)
        print(f"{p}\t{score.probability:.6f}\t{score.decision}")
    return 0


class _EnsembleDetector:
    def __init__(self, members: list[Detector], weights):
        self.members = members
        self.weights = weights or None
        self.resolution = members[0].resolution

    def fake_probability(self, images):
        return ensemble_score([m.fake_probability(images) for m in self.members], self.weights).float()


def cmd_evaluate(run: Run, args) -> int:
    cfg = run.cfg
    dets = _detectors(run, args.detector)
    detector = dets[0] if len(dets) == 1 else _EnsembleDetector(dets, cfg["ensemble.weights"])
    if cfg["eval.registry"]:
        corpora = load_registry(cfg["eval.registry"])
    else:
        manifest = run.require(run.manifest, "prepare")
        corpora = {"held-out": LabeledDataset.load_manifest(manifest).subset("test")}
    det_paths = [Path(p) for p in args.detector] if args.detector else [run.detector_ckpt]
    detector_id = "+".join(file_digest(p)[:12] for p in det_paths)
    report = evaluate_cross(corpora, detector, cfg["detect.threshold"], detector_id=detector_id,
                            config_hash=cfg.hash()[:16], method=cfg["eval.method"])
    if not report.corpora:
        raise UsageError("every corpus was empty; nothing to evaluate")
    out = run.dir / "reports" / detector_id
    stem = out / report.timestamp
    emit_table(report, "csv", stem.with_suffix(".csv"))
    emit_table(report, "markdown", stem.with_suffix(".md"))
    stem.with_suffix(".json").write_text(report.to_json(), encoding="utf-8")
    cfg.freeze(out / "config.cfg")
    print(stem.with_suffix(".md").read_text(), end="")
    for name, r in report.corpora.items():
        m = r.metrics
        print(f"{name}: acc={m.accuracy:.2f} precision={m.precision:.2f} recall={m.recall:.2f} f1={m.f1:.2f}")
    print(f"report -> {stem}.csv")
    return 0


def cmd_toy_data(run: Run, args) -> int:
    if not args.out:
        raise UsageError("toy-data needs --out DIR")
    paths = make_toy_faces(args.out, args.count, args.size, args.toy_seed)
    print(f"wrote {len(paths)} toy images to {args.out}")
    return 0


HANDLERS = {
    "prepare": cmd_prepare, "train-gan": cmd_train_gan, "train-diffusion": cmd_train_diffusion,
    "generate": cmd_generate, "finetune": cmd_finetune, "detect": cmd_detect, "evaluate": cmd_evaluate,
    "toy-data": cmd_toy_data,
}

# command-specific shorthands for config keys
ALIASES = {"--real": "paths.real", "--fake": "paths.fake", "--n": "data.n_per_class", "--name": "run.name",
           "--seed": "run.seed"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cipher", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("images", nargs="*", help="image paths (detect only)")
    parser.add_argument("--config", help="config file or preset name (desk, paper)")
    parser.add_argument("--resume", action="store_true", help="continue training from the run's saved state")
    parser.add_argument("--detector", action="append", help="detector checkpoint (repeat for an ensemble)")
    parser.add_argument("--out", help="output directory (toy-data)")
    parser.add_argument("--count", type=int, default=1000, help="number of toy images")
    parser.add_argument("--size", type=int, default=64, help="toy image side")
    parser.add_argument("--toy-seed", type=int, default=0)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def split_overrides(argv: Sequence[str]) -> tuple[list[str], dict[str, str]]:
    """Separate ``--section.key value`` (and alias) pairs from ordinary arguments."""
    rest, overrides = [], {}
    i = 0
    while i < len(argv):
        arg = argv[i]
        name, eq, inline = arg.partition("=")
        key = None
        if name in ALIASES:
            key = ALIASES[name]
        elif name.startswith("--") and "." in name:
            key = name[2:]
        if key is None:
            rest.append(arg)
            i += 1
            continue
        if eq:
            value = inline
            i += 1
        else:
            if i + 1 >= len(argv):
                raise UsageError(f"{arg} needs a value")
            value = argv[i + 1]
            i += 2
        overrides[key] = value
    return rest, overrides


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        rest, overrides = split_overrides(argv)
        args = build_parser().parse_args(rest)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config, overrides)
        run = Run(cfg)
        if args.command == "toy-data":
            return cmd_toy_data(run, args)
        handler = _setup_logging(run)
        lock = FileLock(str(run.dir / ".lock"))
        try:
            with lock.acquire(timeout=0):
                log.info("command %s (config %s)", args.command, cfg.hash()[:16])
                return HANDLERS[args.command](run, args)
        except Timeout:
            raise UsageError(f"another cipher command holds the lock on {run.dir}")
        finally:
            logging.getLogger().removeHandler(handler)
            handler.close()
    except (UsageError, ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"cipher: error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
