"""Checkpoint files: architecture descriptor, weights and provenance.

A checkpoint is a single ``torch.save`` file. A JSON sidecar with the same
stem (``model.pt`` -> ``model.json``) repeats everything except the weights
so runs can be inspected without loading torch.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .errors import DataIOError

FORMAT_VERSION = 1


def state_checksum(state: dict) -> str:
    """sha256 over every tensor (parameters and buffers) in key order."""
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name]
        h.update(name.encode())
        if isinstance(t, torch.Tensor):
            t = t.detach().cpu().contiguous()
            h.update(str(t.dtype).encode())
            h.update(t.numpy().tobytes() if t.dtype != torch.bfloat16 else t.float().numpy().tobytes())
        else:
            h.update(repr(t).encode())
    return h.hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    return state_checksum(module.state_dict())


@dataclass
class Checkpoint:
    kind: str
    arch: dict
    state_dict: dict
    provenance: dict = field(default_factory=dict)
    log: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def checksum(self) -> str:
        return state_checksum(self.state_dict)

    def summary(self) -> dict:
        return {
            "format": FORMAT_VERSION,
            "kind": self.kind,
            "arch": self.arch,
            "provenance": self.provenance,
            "log": self.log,
            "weights_sha256": self.checksum,
        }

    def save(self, path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            torch.save(
                {
                    "format": FORMAT_VERSION,
                    "kind": self.kind,
                    "arch": self.arch,
                    "state_dict": self.state_dict,
                    "provenance": self.provenance,
                    "log": self.log,
                    "extra": self.extra,
                },
                path,
            )
            path.with_suffix(".json").write_text(json.dumps(self.summary(), indent=1, sort_keys=True))
        except OSError as exc:
            raise DataIOError(f"cannot write checkpoint {path}: {exc}") from exc
        return path

    @classmethod
    def load(cls, path, kind: str | None = None) -> "Checkpoint":
        try:
            blob = torch.load(Path(path), map_location="cpu", weights_only=False)
        except (OSError, RuntimeError) as exc:
            raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
        ckpt = cls(
            kind=blob["kind"],
            arch=blob["arch"],
            state_dict=blob["state_dict"],
            provenance=blob.get("provenance", {}),
            log=blob.get("log", []),
            extra=blob.get("extra", {}),
        )
        if kind is not None and ckpt.kind != kind:
            raise DataIOError(f"{path} holds a {ckpt.kind!r} checkpoint, expected {kind!r}")
        return ckpt
