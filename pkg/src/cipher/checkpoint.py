"""Checkpoint files: an architecture-hash header plus named weight blobs.

Files are written with safetensors. The header metadata carries the
architecture description, its hash and a free-form JSON metadata blob. All
of it lives under one metadata key as sorted JSON: safetensors does not keep
the order of multiple metadata keys stable, and a single key makes a load
followed by a save reproduce the original file byte for byte.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import torch
from safetensors import safe_open
from safetensors.torch import save_file


HEADER_KEY = "cipher"


class CheckpointError(RuntimeError):
    """Raised when a checkpoint is missing, malformed or belongs to another architecture."""


def arch_hash(arch: dict[str, Any]) -> str:
    blob = json.dumps(arch, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def save_checkpoint(
    path: str | Path,
    state: dict[str, torch.Tensor],
    arch: dict[str, Any],
    kind: str,
    meta: dict[str, Any] | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "kind": kind,
        "arch": json.dumps(arch, sort_keys=True, separators=(",", ":")),
        "arch_hash": arch_hash(arch),
        "meta": json.dumps(meta or {}, sort_keys=True, separators=(",", ":")),
    }
    tensors = {k: v.detach().to("cpu").contiguous() for k, v in state.items()}
    save_file(tensors, str(path), metadata={HEADER_KEY: json.dumps(header, sort_keys=True)})
    return path


class Checkpoint:
    """In-memory view of a checkpoint file."""

    def __init__(self, state: dict[str, torch.Tensor], arch: dict[str, Any], kind: str, meta: dict[str, Any]):
        self.state = state
        self.arch = arch
        self.kind = kind
        self.meta = meta

    @property
    def arch_hash(self) -> str:
        return arch_hash(self.arch)

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, self.state, self.arch, self.kind, self.meta)


def load_checkpoint(path: str | Path, kind: str | None = None, expect_arch: dict[str, Any] | None = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with safe_open(str(path), framework="pt") as f:
            raw = (f.metadata() or {}).get(HEADER_KEY)
            state = {k: f.get_tensor(k) for k in f.keys()}
    except Exception as exc:  # safetensors raises several unrelated types
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if raw is None:
        raise CheckpointError(f"checkpoint {path} lacks the {HEADER_KEY!r} header")
    header = json.loads(raw)
    for key in ("kind", "arch", "arch_hash", "meta"):
        if key not in header:
            raise CheckpointError(f"checkpoint {path} lacks header field {key!r}")
    arch = json.loads(header["arch"])
    if arch_hash(arch) != header["arch_hash"]:
        raise CheckpointError(f"checkpoint {path} has a corrupt architecture header")
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"checkpoint {path} holds a {header['kind']!r}, expected {kind!r}")
    if expect_arch is not None and arch_hash(expect_arch) != header["arch_hash"]:
        raise CheckpointError(
            f"architecture hash mismatch for {path}: file has {header['arch_hash'][:12]}, "
            f"configuration expects {arch_hash(expect_arch)[:12]}"
        )
    return Checkpoint(state, arch, header["kind"], json.loads(header["meta"]))


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
