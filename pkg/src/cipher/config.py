"""Flat dotted-key run configuration.

Config files are INI-style: ``[gan]`` followed by ``lr = 0.001`` defines the
key ``gan.lr``. Command-line overrides take precedence over the file, which
takes precedence over the built-in (full-scale) defaults. Keys left empty
that end in ``.seed`` inherit ``run.seed``.
"""
from __future__ import annotations

import configparser
import hashlib
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

DEFAULTS: dict[str, Any] = {
    "run.name": "default",
    "run.seed": 42,
    "run.device": "auto",
    "run.precision": "fp32",
    "paths.runs": "runs",
    "paths.real": "",
    "paths.fake": "",
    "paths.gan_data": "",
    "paths.diffusion_data": "",
    "data.resolution": 64,
    "data.batch_size": 64,
    "data.n_per_class": 15000,
    "data.seed": None,
    "data.split": [0.8, 0.1, 0.1],
    "data.workers": 0,
    "augment.hflip_prob": 0.5,
    "augment.jitter": 0.2,
    "gan.latent_dim": 256,
    "gan.stages": 5,
    "gan.channels": [256, 256, 256, 128, 64],
    "gan.iters_per_stage": 50000,
    "gan.fade_iters": 10000,
    "gan.lr": 0.001,
    "gan.batch_size": 16,
    "gan.gd_ratio": 2,
    "gan.checkpoint_every": 5000,
    "gan.seed": None,
    "diff.T": 1000,
    "diff.beta_start": 1e-4,
    "diff.beta_end": 0.02,
    "diff.iterations": 100000,
    "diff.lr": 2e-4,
    "diff.batch_size": 32,
    "diff.base_channels": 64,
    "diff.multipliers": [1, 2, 4],
    "diff.attention": [32],
    "diff.num_res_blocks": 2,
    "diff.emb_dim": 256,
    "diff.grad_checkpoint": True,
    "diff.checkpoint_every": 5000,
    "diff.sample_every": 10000,
    "diff.seed": None,
    "ddim.steps": 200,
    "ddim.n": 15000,
    "ddim.batch_size": 100,
    "ddim.seed": None,
    "ft.epochs": 50,
    "ft.lr": 1e-4,
    "ft.batch_size": 64,
    "ft.label_smoothing": 0.1,
    "ft.dropout": 0.2,
    "ft.freeze_backbone": False,
    "ft.checkpoint": "best",
    "ft.seed": None,
    "detect.threshold": 0.5,
    "ensemble.weights": [],
    "eval.registry": "",
    "eval.method": "CIPHER-Disc",
}

LIST_OF_FLOATS = {"data.split", "ensemble.weights"}
LIST_OF_INTS = {"gan.channels", "diff.multipliers", "diff.attention"}
PRESETS = ("desk", "paper")


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def coerce(key: str, value: Any) -> Any:
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    if not isinstance(value, str):
        return value
    text = value.strip()
    if key in LIST_OF_FLOATS or key in LIST_OF_INTS:
        conv = int if key in LIST_OF_INTS else float
        try:
            return [conv(v) for v in text.replace(" ", "").split(",") if v]
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    default = DEFAULTS[key]
    if key.endswith(".seed") and key != "run.seed":
        return int(text) if text else None
    try:
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc
    return text


def _render(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_render(v) for v in value)
    return str(value)


class RunConfig:
    def __init__(self, values: Mapping[str, Any] | None = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.values[k] = coerce(k, v)

    def __getitem__(self, key: str) -> Any:
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        value = self.values[key]
        if value is None and key.endswith(".seed"):
            return self.values["run.seed"]
        return value

    def update(self, overrides: Mapping[str, Any]) -> "RunConfig":
        for k, v in overrides.items():
            self.values[k] = coerce(k, v)
        return self

    def resolved(self) -> dict[str, Any]:
        return {k: self[k] for k in sorted(self.values)}

    def to_text(self) -> str:
        sections: dict[str, list[str]] = {}
        for key, value in self.resolved().items():
            sec, name = key.split(".", 1)
            sections.setdefault(sec, []).append(f"{name} = {_render(value)}")
        return "".join(f"[{sec}]\n" + "\n".join(lines) + "\n\n" for sec, lines in sections.items())

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def freeze(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        return path


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    out = {}
    for sec in parser.sections():
        for name, value in parser.items(sec):
            key = f"{sec}.{name}"
            coerce(key, value)
            out[key] = value
    return out


def preset_path(name: str) -> Path:
    return Path(str(resources.files("cipher") / "configs" / f"{name}.cfg"))


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Build a config from a file (or preset name ``desk``/``paper``) plus overrides."""
    values: dict[str, Any] = {}
    if path:
        p = Path(path)
        if not p.is_file() and str(path) in PRESETS:
            p = preset_path(str(path))
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        values = parse_config_text(p.read_text(encoding="utf-8"), str(p))
    cfg = RunConfig(values)
    if overrides:
        cfg.update(overrides)
    return cfg
