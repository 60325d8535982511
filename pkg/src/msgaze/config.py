"""Run configuration: TOML loading, merging, validation and hashing.

Values are resolved from three layers. Built-in defaults are overridden by
command-line flags, which are overridden by the config file. The resolved
configuration is written next to every run's outputs together with its
canonical hash.
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import fields
from pathlib import Path

import tomli_w

from .aeri import AeriTrainConfig
from .augment import AugmentConfig
from .errors import ConfigError
from .gazenet import GazeTrainConfig
from .synth import SceneRanges

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

RESOLVED_NAME = "resolved_config.toml"


def _dataclass_defaults(cls, skip=()):
    out = {}
    obj = cls()
    for f in fields(cls):
        if f.name in skip:
            continue
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def default_config() -> dict:
    return {
        "global": {"seed": 0, "deterministic": True, "device": "cpu", "out_dir": "", "log_level": "INFO"},
        "synth": {"n": 1000, "n_subjects": 20, "val_fraction": 0.25, "write_masks": True,
                  "ranges": SceneRanges().to_dict()},
        "aeri": _dataclass_defaults(AeriTrainConfig, skip=("augment", "seed", "deterministic")),
        "augment": AugmentConfig().to_dict(),
        "gaze": _dataclass_defaults(GazeTrainConfig, skip=("augment", "seed", "deterministic")),
        "harness": {"protocol": "kfold", "k": 3, "bins": 10, "kinds": ["full"],
                    "augment_ablation": False},
    }


# keys whose default is None and which therefore may be absent or set later
_OPTIONAL = {("aeri", "dump_dir"), ("gaze", "dump_dir"), ("gaze", "max_steps")}


def _merge(base: dict, override: dict, path=()) -> dict:
    out = dict(base)
    for k, v in override.items():
        if v is None:
            continue
        here = path + (k,)
        if k not in base and here not in _OPTIONAL:
            raise ConfigError(f"unknown config key {'.'.join(here)}")
        if isinstance(base.get(k), dict) and not _free_form(here):
            if not isinstance(v, dict):
                raise ConfigError(f"{'.'.join(here)} must be a table")
            out[k] = _merge(base[k], v, here)
        else:
            out[k] = v
    return out


def _free_form(path) -> bool:
    # tables whose inner keys are validated by their owners
    return path in {("synth", "ranges"), ("augment", "probability")}


def load_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc


def resolve(flags: dict | None = None, file: dict | str | Path | None = None) -> dict:
    """defaults < flags < file; unknown keys raise ConfigError."""
    cfg = default_config()
    if flags:
        cfg = _merge(cfg, flags)
    if file is not None:
        data = dict(file) if isinstance(file, dict) else load_file(file)
        data.pop("run", None)  # stamp added by write_resolved; lets resolved files be reused
        cfg = _merge(cfg, data)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    aeri_cfg(cfg)
    gaze_cfg(cfg)
    SceneRanges.from_dict(cfg["synth"]["ranges"]).validate()
    h = cfg["harness"]
    if h["protocol"] not in ("loso", "kfold"):
        raise ConfigError(f"harness.protocol must be 'loso' or 'kfold', got {h['protocol']!r}")
    if h["bins"] < 1 or h["k"] < 2:
        raise ConfigError("harness.bins must be >= 1 and harness.k >= 2")


def aeri_cfg(cfg: dict) -> AeriTrainConfig:
    g = cfg["global"]
    return AeriTrainConfig.from_dict({**cfg["aeri"], "augment": cfg["augment"], "seed": g["seed"],
                                      "deterministic": g["deterministic"]})


def gaze_cfg(cfg: dict) -> GazeTrainConfig:
    g = cfg["global"]
    return GazeTrainConfig.from_dict({**cfg["gaze"], "seed": g["seed"], "deterministic": g["deterministic"]})


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def _strip_none(d):
    if isinstance(d, dict):
        return {k: _strip_none(v) for k, v in d.items() if v is not None}
    return d


def resolved_path(out, is_dir: bool) -> Path:
    """``<dir>/resolved_config.toml`` for directory outputs, ``<stem>.config.toml`` beside files."""
    out = Path(out)
    return out / RESOLVED_NAME if is_dir else out.with_suffix(".config.toml")


def write_resolved(cfg: dict, path, command: str) -> str:
    """Write the resolved config (plus command and hash) to ``path``; returns the hash."""
    digest = config_hash(cfg)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = tomli_w.dumps(_strip_none({"run": {"command": command, "config_hash": digest}, **cfg}))
    path.write_text(body)
    return digest
