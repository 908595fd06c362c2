"""Procedural face-like images for desk-scale runs and tests.

Each image is a shaded head ellipse with hair, eyes, brows and a mouth on a
gradient background, finished with mild sensor noise. Nothing here tries to
look photographic; it only gives the pipeline a structured "real" corpus
with a consistent layout and texture.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

SKIN = np.array([[241, 194, 167], [224, 172, 105], [198, 134, 66], [141, 85, 36], [255, 219, 172]], dtype=float)
HAIR = np.array([[20, 15, 10], [90, 60, 30], [180, 140, 80], [120, 40, 20], [60, 60, 60]], dtype=float)


def _jitter_color(base: np.ndarray, rng: np.random.Generator, amount: float = 18.0) -> tuple[int, int, int]:
    c = np.clip(base + rng.normal(0, amount, 3), 0, 255)
    return tuple(int(v) for v in c)


def toy_face(rng: np.random.Generator, size: int = 64) -> Image.Image:
    s = 4  # draw at 4x and downsample for smooth edges
    S = size * s
    top = rng.uniform(40, 220, 3)
    bottom = rng.uniform(40, 220, 3)
    ramp = np.linspace(0, 1, S)[:, None, None]
    bg = (top * (1 - ramp) + bottom * ramp) * np.ones((1, S, 1))
    img = Image.fromarray(bg.astype(np.uint8), "RGB")
    d = ImageDraw.Draw(img)

    cx = S / 2 + rng.normal(0, S * 0.03)
    cy = S / 2 + rng.normal(0, S * 0.03) + S * 0.04
    rx = S * rng.uniform(0.24, 0.31)
    ry = S * rng.uniform(0.31, 0.38)
    skin = SKIN[rng.integers(len(SKIN))]
    hair = HAIR[rng.integers(len(HAIR))]
    hair_c = _jitter_color(hair, rng, 10)
    d.ellipse([cx - rx * 1.12, cy - ry * 1.15, cx + rx * 1.12, cy + ry * 0.55], fill=hair_c)
    d.rectangle([cx - rx * 0.25, cy + ry * 0.7, cx + rx * 0.25, S], fill=_jitter_color(skin * 0.85, rng, 8))
    d.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=_jitter_color(skin, rng))
    fringe = rng.uniform(0.35, 0.65)
    d.chord([cx - rx * 1.02, cy - ry * 1.05, cx + rx * 1.02, cy + ry * fringe], 180, 360, fill=hair_c)

    eye_y = cy - ry * rng.uniform(0.02, 0.15)
    eye_dx = rx * rng.uniform(0.35, 0.45)
    er = rx * rng.uniform(0.09, 0.13)
    iris = _jitter_color(np.array([60, 80, 110]), rng, 30)
    for sx in (-1, 1):
        ex = cx + sx * eye_dx
        d.ellipse([ex - er * 1.5, eye_y - er, ex + er * 1.5, eye_y + er], fill=(245, 245, 240))
        d.ellipse([ex - er * 0.75, eye_y - er * 0.75, ex + er * 0.75, eye_y + er * 0.75], fill=iris)
        d.ellipse([ex - er * 0.3, eye_y - er * 0.3, ex + er * 0.3, eye_y + er * 0.3], fill=(10, 10, 10))
        d.line([ex - er * 1.6, eye_y - er * 2.2, ex + er * 1.6, eye_y - er * 2.4 + rng.normal(0, er * 0.3)],
               fill=hair_c, width=max(1, int(er * 0.6)))
    nose = _jitter_color(skin * 0.8, rng, 5)
    d.line([cx, eye_y + er, cx - rx * 0.06, cy + ry * 0.25], fill=nose, width=max(1, int(er * 0.4)))
    mouth_y = cy + ry * rng.uniform(0.45, 0.58)
    mw = rx * rng.uniform(0.3, 0.45)
    smile = rng.uniform(-0.1, 0.35)
    d.arc([cx - mw, mouth_y - ry * 0.12, cx + mw, mouth_y + ry * smile + 1], 10, 170,
          fill=_jitter_color(np.array([170, 60, 70]), rng, 20), width=max(1, int(er * 0.6)))

    img = img.filter(ImageFilter.GaussianBlur(s * 0.6)).resize((size, size), Image.BICUBIC)
    arr = np.asarray(img, dtype=float)
    yy, xx = np.mgrid[0:size, 0:size] / size
    light = 1 + 0.15 * ((xx - 0.5) * rng.normal() + (yy - 0.5) * rng.normal())
    arr = arr * light[:, :, None] + rng.normal(0, 3.0, arr.shape)
    return Image.fromarray(np.clip(arr, 0, 255).astype(np.uint8), "RGB")


def make_toy_faces(out_dir: str | Path, n: int, size: int = 64, seed: int = 0) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    width = max(5, len(str(n)))
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        p = out_dir / f"face_{i:0{width}d}.png"
        toy_face(rng, size).save(p, format="PNG")
        paths.append(p)
    return paths
