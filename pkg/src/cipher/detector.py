"""Reuse a progressive-GAN discriminator as a real/fake detector.

The GAN discriminator scores "realness"; the detector reports the fake-class
probability ``sigmoid(-logit)`` so that its pretrained head keeps its
meaning before fine-tuning starts. Labels follow the dataset convention
real = 0, fake = 1.
"""
from __future__ import annotations

import csv
import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .dataio import (
    AugmentConfig,
    LabeledDataset,
    augment,
    cached_tensors,
    load_batches,
    tensor_batches,
)
from .diffusion.unet import UNet
from .progan import Discriminator, MinibatchStd, load_discriminator

log = logging.getLogger(__name__)

DETECTOR_KIND = "cipher-detector"


def smooth_labels(y: torch.Tensor, alpha: float) -> torch.Tensor:
    """Symmetric binary smoothing: y * (1 - alpha) + alpha / 2."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"label smoothing must lie in [0, 1), got {alpha}")
    return y * (1.0 - alpha) + alpha / 2.0


@dataclass
class FinetuneConfig:
    epochs: int = 50
    lr: float = 1e-4
    batch_size: int = 64
    label_smoothing: float = 0.1
    dropout: float = 0.2
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 42
    freeze_backbone: bool = False
    cache: bool = True
    reference_images: int = 2048

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class DetectionScore:
    probability: float
    decision: str
    threshold: float

    @classmethod
    def from_probability(cls, p: float, threshold: float = 0.5) -> "DetectionScore":
        return cls(float(p), "fake" if p >= threshold else "real", threshold)


class Detector:
    """A fine-tuned discriminator plus the frozen minibatch-stddev statistic."""

    def __init__(self, disc: Discriminator, mbstd_reference: float | None = None, meta: dict | None = None):
        self.disc = disc
        self.meta = dict(meta or {})
        self.mbstd_reference = mbstd_reference

    @property
    def mbstd_reference(self) -> float | None:
        return self.disc.head.mbstd.reference

    @mbstd_reference.setter
    def mbstd_reference(self, value: float | None) -> None:
        self.disc.head.mbstd.reference = value

    @property
    def resolution(self) -> int:
        return self.disc.max_resolution

    def fake_logits(self, x: torch.Tensor) -> torch.Tensor:
        return -self.disc.logits(x)

    @torch.no_grad()
    def fake_probability(self, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
        if images.ndim != 4 or images.shape[-1] != self.resolution or images.shape[-2] != self.resolution:
            raise ValueError(f"detector expects {self.resolution}x{self.resolution} images, got {tuple(images.shape)}")
        was = self.disc.training
        self.disc.eval()
        try:
            out = [torch.sigmoid(self.fake_logits(images[i:i + batch_size])) for i in range(0, len(images), batch_size)]
        finally:
            self.disc.train(was)
        return torch.cat(out) if out else torch.empty(0)

    def state_dict(self) -> dict[str, torch.Tensor]:
        return self.disc.state_dict()

    def save(self, path: str | Path) -> Path:
        meta = dict(self.meta)
        meta["mbstd_reference"] = self.mbstd_reference
        return save_checkpoint(path, self.disc.state_dict(), self.disc.arch(), DETECTOR_KIND, meta)

    @classmethod
    def load(cls, path: str | Path) -> "Detector":
        ckpt = load_checkpoint(path, kind=DETECTOR_KIND)
        disc = Discriminator(ckpt.arch["channels"])
        disc.load_state_dict(ckpt.state)
        disc.eval()
        meta = dict(ckpt.meta)
        ref = meta.pop("mbstd_reference", None)
        return cls(disc, ref, meta)


def detect(images: torch.Tensor, det: Detector, threshold: float = 0.5) -> list[DetectionScore]:
    return [DetectionScore.from_probability(p, threshold) for p in det.fake_probability(images).tolist()]


# ---------------------------------------------------------------------------
# fine-tuning


def _aug_generator(seed: int, epoch: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, epoch, 0xA06]).generate_state(1)[0]
    return torch.Generator().manual_seed(int(state))


@torch.no_grad()
def reference_statistic(disc: Discriminator, images: torch.Tensor, batch_size: int) -> float | None:
    """Mean minibatch-stddev statistic over eval-mode batches of ``images``."""
    if len(images) == 0:
        return None
    captured: list[float] = []

    def hook(module, inputs, output):
        captured.append(MinibatchStd.batch_statistic(inputs[0]))

    was = disc.training
    mbstd = disc.head.mbstd
    saved_ref = mbstd.reference
    disc.eval()
    mbstd.reference = None
    handle = mbstd.register_forward_hook(hook)
    try:
        for i in range(0, len(images), batch_size):
            chunk = images[i:i + batch_size]
            if len(chunk) > 1:
                disc.logits(chunk)
    finally:
        handle.remove()
        mbstd.reference = saved_ref
        disc.train(was)
    return float(np.mean(captured)) if captured else None


def _accuracy(det: Detector, images: torch.Tensor, labels: torch.Tensor, threshold: float = 0.5) -> float:
    if len(images) == 0:
        return float("nan")
    pred = (det.fake_probability(images) >= threshold).float()
    return float((pred == labels).float().mean())


@dataclass
class FinetuneResult:
    final: Detector
    best: Detector
    history: list[dict] = field(default_factory=list)


def _check_dataset(dataset: LabeledDataset) -> None:
    counts = dataset.class_counts()
    if counts[0] != counts[1]:
        log.warning("fine-tuning dataset is unbalanced: %d real vs %d fake", counts[0], counts[1])


def finetune(
    disc: Discriminator | str | Path,
    dataset: LabeledDataset,
    cfg: FinetuneConfig,
    resolution: int | None = None,
    out_dir: str | Path | None = None,
) -> FinetuneResult:
    """Fine-tune end to end with BCE against smoothed labels.

    Train on the ``train`` split, select the best epoch on ``val``. With
    ``epochs == 0`` the returned detectors carry the input weights unchanged.
    """
    if not isinstance(disc, Discriminator):
        disc, _ = load_discriminator(disc)
    disc = copy.deepcopy(disc)
    if resolution is not None and disc.max_resolution != resolution:
        raise CheckpointError(
            f"discriminator is built for {disc.max_resolution}px but the dataset is prepared at {resolution}px"
        )
    res = disc.max_resolution
    _check_dataset(dataset)
    torch.manual_seed(cfg.seed)
    disc.head.dropout.p = cfg.dropout

    train_ds, val_ds = dataset.subset("train"), dataset.subset("val")
    if cfg.cache:
        train_x, train_y, skipped = cached_tensors(train_ds, res)
        for p in skipped:
            log.warning("skipped unreadable training image %s", p)
    val_x, val_y, _ = cached_tensors(val_ds, res) if len(val_ds) else (torch.empty(0, 3, res, res), torch.empty(0), [])

    if cfg.freeze_backbone:
        for name, p in disc.named_parameters():
            p.requires_grad_(name.startswith("head."))
    params = [p for p in disc.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr) if params else None

    meta = {"epochs": cfg.epochs, "seed": cfg.seed, "label_smoothing": cfg.label_smoothing}
    ref_images = lambda: train_x[: cfg.reference_images] if cfg.cache else _first_images(train_ds, res, cfg.reference_images)

    def snapshot(epoch: int, val_acc: float) -> Detector:
        d = copy.deepcopy(disc)
        d.eval()
        ref = reference_statistic(d, ref_images(), cfg.batch_size)
        return Detector(d, ref, {**meta, "epoch": epoch, "val_acc": val_acc})

    final = snapshot(0, float("nan"))
    if len(val_x):
        final.meta["val_acc"] = _accuracy(final, val_x, val_y)
    best = final
    history = []
    for epoch in range(cfg.epochs):
        disc.train()
        gen = _aug_generator(cfg.seed, epoch)
        if cfg.cache:
            batches = tensor_batches(train_x, train_y, cfg.batch_size, True, cfg.seed, epoch)
        else:
            batches = load_batches(train_ds, cfg.batch_size, True, cfg.seed, epoch, res)
        total, count = 0.0, 0
        for x, y in batches:
            if len(x) < 2:
                continue  # a single image has no batch spread
            x = augment(x, cfg.augment, gen)
            loss = F.binary_cross_entropy_with_logits(-disc.logits(x), smooth_labels(y, cfg.label_smoothing))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(x)
            count += len(x)
        val_acc = float("nan")
        final = snapshot(epoch + 1, val_acc)
        if len(val_x):
            val_acc = final.meta["val_acc"] = _accuracy(final, val_x, val_y)
        row = {"epoch": epoch + 1, "train_loss": total / max(count, 1), "val_acc": val_acc}
        history.append(row)
        log.info("fine-tune epoch %d: loss %.4f, val acc %.4f", epoch + 1, row["train_loss"], val_acc)
        # without a validation split the last epoch wins
        if epoch == 0 or not len(val_x) or val_acc > best.meta["val_acc"]:
            best = final

    for p in disc.parameters():
        p.requires_grad_(True)
    result = FinetuneResult(final, best, history)
    if out_dir is not None:
        out_dir = Path(out_dir)
        final.save(out_dir / "final.safetensors")
        best.save(out_dir / "best.safetensors")
        with open(out_dir / "finetune_log.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=("epoch", "train_loss", "val_acc"))
            writer.writeheader()
            for row in history:
                writer.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
    return result


def _first_images(ds: LabeledDataset, res: int, limit: int) -> torch.Tensor:
    sub = LabeledDataset(ds.items[:limit], ds.root)
    return cached_tensors(sub, res)[0]


# ---------------------------------------------------------------------------
# features and ensembles


@dataclass
class FeatureBundle:
    features: dict[str, torch.Tensor] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.features)

    def to_csv(self, path: str | Path, image_ids: Sequence[str] | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["image_id", "depth_id", "vector"])
            for depth, mat in self.features.items():
                for i, row in enumerate(mat.tolist()):
                    image_id = image_ids[i] if image_ids is not None else str(i)
                    writer.writerow([image_id, depth, " ".join(f"{v:.9g}" for v in row)])
        return path


def feature_depths(backbone: Detector | Discriminator | UNet) -> list[str]:
    if isinstance(backbone, Detector):
        backbone = backbone.disc
    if isinstance(backbone, Discriminator):
        return [f"block{k}" for k in range(backbone.num_stages - 1, 0, -1)] + ["final"]
    if isinstance(backbone, UNet):
        return [f"enc{i}" for i in range(backbone.spec.depth)] + ["mid"]
    raise TypeError(f"unsupported backbone {type(backbone).__name__}")


@torch.no_grad()
def extract_features(
    images: torch.Tensor,
    backbone: Detector | Discriminator | UNet,
    depths: Iterable[str],
    t_probe: int | None = None,
    T: int = 1000,
) -> FeatureBundle:
    """Global-average-pooled activations after each requested block.

    Discriminator depths are ``block{k}`` (output of the stage-k block) and
    ``final`` (the flattened head features). U-Net depths are ``enc{i}`` and
    ``mid``; the image is fed as x_t at timestep ``t_probe`` (default T/2).
    """
    depths = list(depths)
    if not depths:
        return FeatureBundle()
    valid = feature_depths(backbone)
    bad = [d for d in depths if d not in valid]
    if bad:
        raise ValueError(f"invalid depth ids {bad}; valid ids are {valid}")
    taps: dict[str, torch.Tensor] = {}
    if isinstance(backbone, UNet):
        was = backbone.training
        backbone.eval()
        t = torch.full((len(images),), t_probe if t_probe is not None else T // 2, dtype=torch.long)
        backbone(images, t, taps=taps)
        backbone.train(was)
    else:
        disc = backbone.disc if isinstance(backbone, Detector) else backbone
        was = disc.training
        disc.eval()
        disc.logits(images, taps=taps)
        disc.train(was)
    out = {}
    for d in depths:
        a = taps[d]
        out[d] = a.mean(dim=(2, 3)) if a.ndim == 4 else a.flatten(1)
    return FeatureBundle(out)


def ensemble_score(scores: Sequence[torch.Tensor | Sequence[float]], weights: Sequence[float] | None = None) -> torch.Tensor:
    """Weighted arithmetic mean of member probability vectors (uniform by default)."""
    if not scores:
        raise ValueError("ensemble needs at least one member")
    mats = [torch.as_tensor(s, dtype=torch.float64).reshape(-1) for s in scores]
    if any(len(m) != len(mats[0]) for m in mats):
        raise ValueError(f"member score vectors differ in length: {[len(m) for m in mats]}")
    if weights is None:
        w = torch.full((len(mats),), 1.0 / len(mats), dtype=torch.float64)
    else:
        w = torch.as_tensor(weights, dtype=torch.float64)
        if len(w) != len(mats) or (w < 0).any() or abs(float(w.sum()) - 1.0) > 1e-9:
            raise ValueError("ensemble weights must be nonnegative, one per member, and sum to 1")
    out = (torch.stack(mats) * w[:, None]).sum(0)
    return out.clamp(0.0, 1.0)
