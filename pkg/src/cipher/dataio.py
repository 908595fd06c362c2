"""Image ingestion, augmentation and the balanced real/fake dataset.

Images travel through the package as float32 tensors shaped N x 3 x H x W
with values in [-1, 1]. Manifests are tab-separated text files with one
``path<TAB>label<TAB>split`` record per line; paths are stored relative to
the manifest's directory so that a run directory can be moved or replayed
elsewhere without changing its manifest bytes.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
VALID_RESOLUTIONS = (4, 8, 16, 32, 64)
SPLITS = ("train", "val", "test")
REAL, FAKE = 0, 1


class RejectedInputError(ValueError):
    """An image that cannot be turned into a training tensor (e.g. zero-sized)."""


class InsufficientImagesError(ValueError):
    """A class directory holds fewer usable images than requested."""


def check_image_tensor(x: torch.Tensor) -> torch.Tensor:
    """Assert the ImageTensor invariants and return ``x`` unchanged."""
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected an N x 3 x H x W batch, got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h != w or h not in VALID_RESOLUTIONS:
        raise ValueError(f"image side must be one of {VALID_RESOLUTIONS} and square, got {h}x{w}")
    if x.numel() and (x.min() < -1 or x.max() > 1):
        raise ValueError("image values fall outside [-1, 1]")
    return x


# ---------------------------------------------------------------------------
# preprocessing


def _center_square(img: Image.Image) -> Image.Image:
    w, h = img.size
    if w == h:
        return img
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    return img.crop((left, top, left + side, top + side))


def preprocess(image: Image.Image | np.ndarray, target_res: int) -> torch.Tensor:
    """Center-crop to square, bicubic-resize to ``target_res`` and map [0, 255] to [-1, 1].

    Accepts a PIL image or an ``H x W`` / ``H x W x C`` array of 0..255
    values. Grayscale inputs are replicated to three channels; alpha is
    dropped. Resampling runs per channel in 32-bit float so no uint8
    rounding is introduced. Returns a ``3 x target_res x target_res`` tensor.
    """
    if target_res not in VALID_RESOLUTIONS:
        raise ValueError(f"target_res must be one of {VALID_RESOLUTIONS}, got {target_res}")
    if isinstance(image, np.ndarray):
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise RejectedInputError(f"cannot preprocess array of shape {arr.shape}")
        if arr.shape[2] == 1:
            arr = np.repeat(arr, 3, axis=2)
        arr = arr[:, :, :3]
        channels = [Image.fromarray(np.ascontiguousarray(arr[:, :, c]), mode="F") for c in range(3)]
    else:
        if image.width == 0 or image.height == 0:
            raise RejectedInputError(f"zero-dimension image {image.size}")
        rgb = image.convert("RGB")
        channels = [ch.convert("F") for ch in rgb.split()]
    w, h = channels[0].size
    if w == 0 or h == 0:
        raise RejectedInputError(f"zero-dimension image {(w, h)}")
    out = []
    for ch in channels:
        ch = _center_square(ch)
        if ch.size != (target_res, target_res):
            ch = ch.resize((target_res, target_res), Image.BICUBIC)
        out.append(np.asarray(ch, dtype=np.float32))
    arr = np.stack(out, axis=0) / 127.5 - 1.0
    # bicubic overshoot near edges can leave [-1, 1]
    return torch.from_numpy(np.clip(arr, -1.0, 1.0).astype(np.float32))


def load_image(path: str | Path, target_res: int) -> torch.Tensor:
    """Decode ``path`` and preprocess it. Raises ``OSError`` for unreadable files."""
    try:
        with Image.open(path) as img:
            img.load()
            return preprocess(img, target_res)
    except (UnidentifiedImageError, OSError) as exc:
        raise OSError(f"unreadable image {path}: {exc}") from exc


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """Map a 3 x H x W tensor in [-1, 1] to an H x W x 3 uint8 array."""
    arr = ((x.detach().cpu().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).numpy()


def save_png(x: torch.Tensor, path: str | Path) -> None:
    Image.fromarray(to_uint8(x)).save(path, format="PNG")


def list_images(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"image directory not found: {directory}")
    return sorted(p for p in directory.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_directory(directory: str | Path, target_res: int, limit: int | None = None) -> torch.Tensor:
    """Load every readable image under ``directory`` (sorted order) into one batch."""
    rows = []
    for p in list_images(directory):
        if limit is not None and len(rows) >= limit:
            break
        try:
            rows.append(load_image(p, target_res))
        except (OSError, RejectedInputError) as exc:
            log.warning("skipping %s: %s", p, exc)
    if not rows:
        raise ValueError(f"no usable images under {directory}")
    return torch.stack(rows)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    hflip_prob: float = 0.5
    jitter_strength: float = 0.2
    # geometric transforms are never applied; kept so configs can state it
    geometric_transforms: bool = False

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError(f"hflip_prob must lie in [0, 1], got {self.hflip_prob}")
        if self.jitter_strength < 0:
            raise ValueError(f"jitter_strength must be >= 0, got {self.jitter_strength}")
        if self.geometric_transforms:
            raise ValueError("geometric transforms are disabled for fine-tuning")


LUMA = (0.299, 0.587, 0.114)


def hflip(batch: torch.Tensor) -> torch.Tensor:
    return batch.flip(-1)


def draw_jitter_factors(n: int, strength: float, generator: torch.Generator) -> torch.Tensor:
    """``n x 3`` brightness/contrast/saturation factors, uniform in [1-s, 1+s]."""
    u = torch.rand(n, 3, generator=generator, dtype=torch.float64)
    return (1.0 - strength + 2.0 * strength * u).to(torch.float32)


def _luma(x01: torch.Tensor) -> torch.Tensor:
    w = torch.tensor(LUMA, dtype=x01.dtype, device=x01.device).view(1, 3, 1, 1)
    return (x01 * w).sum(dim=1, keepdim=True)


def color_jitter(batch: torch.Tensor, factors: torch.Tensor) -> torch.Tensor:
    """Apply brightness, contrast and saturation factors (one row per sample)."""
    x = (batch + 1) / 2
    b, c, s = (factors[:, i].view(-1, 1, 1, 1).to(x.dtype) for i in range(3))
    x = (x * b).clamp(0, 1)
    mean = _luma(x).mean(dim=(2, 3), keepdim=True)
    x = ((x - mean) * c + mean).clamp(0, 1)
    gray = _luma(x)
    x = ((x - gray) * s + gray).clamp(0, 1)
    return x * 2 - 1


def augment(batch: torch.Tensor, cfg: AugmentConfig, generator: torch.Generator) -> torch.Tensor:
    """Random per-sample horizontal flip plus color jitter; shape is preserved."""
    n = batch.shape[0]
    out = batch
    flips = torch.rand(n, generator=generator) < cfg.hflip_prob
    if flips.any():
        out = torch.where(flips.view(-1, 1, 1, 1), hflip(out), out)
    if cfg.jitter_strength > 0:
        out = color_jitter(out, draw_jitter_factors(n, cfg.jitter_strength, generator))
    return out.clamp(-1, 1)


# ---------------------------------------------------------------------------
# labeled datasets


@dataclass(frozen=True)
class Item:
    path: str
    label: int
    split: str


@dataclass
class LabeledDataset:
    items: list[Item]
    root: Path = field(default_factory=Path.cwd)
    flags: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def resolve(self, item: Item) -> Path:
        p = Path(item.path)
        return p if p.is_absolute() else self.root / p

    def class_counts(self) -> dict[int, int]:
        counts = {REAL: 0, FAKE: 0}
        for it in self.items:
            counts[it.label] += 1
        return counts

    @property
    def is_balanced(self) -> bool:
        counts = self.class_counts()
        return counts[REAL] == counts[FAKE]

    def subset(self, split: str) -> "LabeledDataset":
        return LabeledDataset([it for it in self.items if it.split == split], self.root, list(self.flags))

    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.items], dtype=np.int64)

    def to_manifest(self) -> str:
        return "".join(f"{it.path}\t{it.label}\t{it.split}\n" for it in self.items)

    def save_manifest(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_manifest())
        return path

    @classmethod
    def load_manifest(cls, path: str | Path) -> "LabeledDataset":
        path = Path(path)
        items = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ValueError(f"{path}:{lineno}: expected path<TAB>label<TAB>split")
                label = int(parts[1])
                if label not in (REAL, FAKE):
                    raise ValueError(f"{path}:{lineno}: label must be 0 or 1, got {label}")
                items.append(Item(parts[0], label, parts[2]))
        ds = cls(items, path.parent.resolve())
        if not items:
            ds.flags.append("empty")
        return ds

    @classmethod
    def from_directory(cls, directory: str | Path, label: int, split: str = "test") -> "LabeledDataset":
        """Every image under ``directory`` with one label, e.g. for an evaluation corpus."""
        directory = Path(directory).resolve()
        return cls([Item(str(p), label, split) for p in list_images(directory)], directory)

    @classmethod
    def concat(cls, parts: Sequence["LabeledDataset"]) -> "LabeledDataset":
        items = [Item(str(ds.resolve(it)), it.label, it.split) for ds in parts for it in ds.items]
        return cls(items, Path("/"))


def is_readable(path: Path) -> bool:
    try:
        with Image.open(path) as img:
            img.verify()
            return img.width > 0 and img.height > 0
    except Exception:  # PIL raises a wide range of types on corrupt data
        return False


def _select_usable(paths: list[Path], n: int, rng: np.random.Generator, cls_name: str) -> list[Path]:
    order = rng.permutation(len(paths))
    chosen = []
    for i in order:
        if len(chosen) == n:
            break
        p = paths[i]
        if is_readable(p):
            chosen.append(p)
        else:
            log.warning("skipping unreadable %s image %s", cls_name, p)
    if len(chosen) < n:
        raise InsufficientImagesError(
            f"{cls_name} class has {len(chosen)} usable images but {n} were requested "
            f"(deficit {n - len(chosen)})"
        )
    return chosen


def split_counts(n: int, fracs: Sequence[float]) -> tuple[int, int, int]:
    """Partition ``n`` into train/val/test sizes; rounding remainder goes to train."""
    if len(fracs) != 3 or any(f < 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three nonnegative numbers summing to 1, got {fracs}")
    n_val = int(round(n * fracs[1]))
    n_test = int(round(n * fracs[2]))
    n_val = min(n_val, n)
    n_test = min(n_test, n - n_val)
    return n - n_val - n_test, n_val, n_test


def build_balanced_dataset(
    real_dir: str | Path,
    fake_dir: str | Path,
    n_per_class: int,
    split_fracs: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 42,
    manifest_path: str | Path | None = None,
) -> LabeledDataset:
    """Pick ``n_per_class`` images from each directory and assign stratified splits.

    Selection walks a seeded permutation of the sorted file list and keeps the
    first readable images, so the result is a pure function of the directory
    contents and ``seed``. When ``manifest_path`` is given the manifest is
    written there with paths relative to its directory.
    """
    if n_per_class < 0:
        raise ValueError("n_per_class must be >= 0")
    n_train, n_val, n_test = split_counts(n_per_class, split_fracs)
    root = Path(manifest_path).parent.resolve() if manifest_path else Path.cwd()
    rng = np.random.default_rng(seed)
    per_class = {}
    for label, directory, name in ((REAL, real_dir, "real"), (FAKE, fake_dir, "fake")):
        paths = list_images(directory)
        if len(paths) < n_per_class:
            raise InsufficientImagesError(
                f"{name} class has {len(paths)} images in {directory} but {n_per_class} were requested "
                f"(deficit {n_per_class - len(paths)})"
            )
        per_class[label] = _select_usable(paths, n_per_class, rng, name)
    items = []
    bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, n_per_class)}
    for split in SPLITS:
        lo, hi = bounds[split]
        for label in (REAL, FAKE):
            for p in per_class[label][lo:hi]:
                items.append(Item(os.path.relpath(p.resolve(), root), label, split))
    ds = LabeledDataset(items, root)
    if n_per_class == 0:
        ds.flags.append("empty")
        log.warning("balanced dataset requested with n_per_class=0; manifest is empty")
    if manifest_path is not None:
        ds.save_manifest(manifest_path)
    return ds


# ---------------------------------------------------------------------------
# batching


@dataclass
class EpochReport:
    epoch: int = 0
    delivered: int = 0
    skipped: list[str] = field(default_factory=list)


def epoch_order(n: int, shuffle: bool, seed: int, epoch: int) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def _try_load(path: Path, res: int) -> torch.Tensor | None:
    try:
        return load_image(path, res)
    except (OSError, RejectedInputError) as exc:
        log.warning("skipping %s at load time: %s", path, exc)
        return None


def load_batches(
    dataset: LabeledDataset,
    batch_size: int,
    shuffle: bool = True,
    seed: int = 0,
    epoch: int = 0,
    resolution: int = 64,
    workers: int = 0,
    report: EpochReport | None = None,
) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Yield ``(images, labels)`` batches covering every item once.

    The order is a pure function of ``(seed, epoch)``. Files that fail to
    load are dropped from their batch and listed in ``report.skipped``.
    Decoding with ``workers > 0`` uses a thread pool; ``map`` preserves
    order so batches match the single-worker result exactly.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(dataset) == 0:
        raise ValueError("cannot batch an empty dataset")
    if report is None:
        report = EpochReport()
    report.epoch = epoch
    order = epoch_order(len(dataset), shuffle, seed, epoch)
    pool = ThreadPoolExecutor(workers) if workers > 0 else None
    try:
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            paths = [dataset.resolve(dataset.items[i]) for i in idx]
            if pool is None:
                loaded = [_try_load(p, resolution) for p in paths]
            else:
                loaded = list(pool.map(_try_load, paths, [resolution] * len(paths)))
            xs, ys = [], []
            for i, p, x in zip(idx, paths, loaded):
                if x is None:
                    report.skipped.append(str(p))
                    continue
                xs.append(x)
                ys.append(dataset.items[i].label)
            if not xs:
                continue
            report.delivered += len(xs)
            yield torch.stack(xs), torch.tensor(ys, dtype=torch.float32)
    finally:
        if pool is not None:
            pool.shutdown()


def cached_tensors(dataset: LabeledDataset, resolution: int) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
    """Decode a whole dataset once; returns images, labels and skipped paths."""
    xs, ys, skipped = [], [], []
    for it in dataset.items:
        p = dataset.resolve(it)
        x = _try_load(p, resolution)
        if x is None:
            skipped.append(str(p))
            continue
        xs.append(x)
        ys.append(it.label)
    if not xs:
        return torch.empty(0, 3, resolution, resolution), torch.empty(0), skipped
    return torch.stack(xs), torch.tensor(ys, dtype=torch.float32), skipped


def tensor_batches(
    images: torch.Tensor, labels: torch.Tensor, batch_size: int, shuffle: bool, seed: int, epoch: int
) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """In-memory counterpart of :func:`load_batches` with the same ordering rule."""
    order = torch.from_numpy(epoch_order(len(images), shuffle, seed, epoch))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield images[idx], labels[idx]


def infinite_batches(images: torch.Tensor, batch_size: int, seed: int) -> Iterator[torch.Tensor]:
    """Endless shuffled minibatches drawn epoch by epoch from an in-memory batch."""
    epoch = 0
    n = len(images)
    if n == 0:
        raise ValueError("no images to draw batches from")
    while True:
        order = torch.from_numpy(epoch_order(n, True, seed, epoch))
        for start in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield images[order[start:start + batch_size]]
        epoch += 1
