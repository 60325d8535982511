"""Eye-region isolation network: a U-Net producing iris and visible-eyeball masks.

The network maps a 1x36x60 grayscale image (scaled to [0, 1]) to two soft
masks in (0, 1): channel 0 is the iris region, channel 1 the visible eyeball.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import AugmentConfig, augment_batch
from .checkpoint import Checkpoint, module_checksum
from .data import EyeArrays, load_dataset
from .errors import ArchitectureError, ConfigError, ContractError, TrainingError
from .metrics import miou

log = logging.getLogger(__name__)

KIND = "aeri"
INPUT_SHAPE = (36, 60)


@dataclass(frozen=True)
class AeriArchitecture:
    """Five encoder levels (64..1024 channels at width 1.0), four decoder levels."""

    base_channels: int = 64
    depth: int = 5
    width_multiplier: float = 1.0
    in_channels: int = 1
    out_channels: int = 2
    input_shape: tuple = INPUT_SHAPE

    def channels(self) -> list[int]:
        return [max(1, round(self.base_channels * self.width_multiplier * 2**i)) for i in range(self.depth)]

    def level_shapes(self) -> list[tuple[int, int]]:
        h, w = self.input_shape
        shapes = [(h, w)]
        for _ in range(self.depth - 1):
            h, w = h // 2, w // 2
            shapes.append((h, w))
        return shapes

    def validate(self) -> None:
        if self.width_multiplier <= 0:
            raise ArchitectureError(f"width_multiplier must be positive, got {self.width_multiplier}")
        if self.depth < 2:
            raise ArchitectureError("need at least two levels")
        shapes = self.level_shapes()
        if min(shapes[-1]) < 1:
            raise ArchitectureError(f"input {self.input_shape} too small for {self.depth} levels")
        # each decoder step upsamples by two; the skip may be one pixel larger after floor pooling
        for (hs, ws), (hl, wl) in zip(shapes[:-1], shapes[1:]):
            if not (0 <= hs - 2 * hl <= 1 and 0 <= ws - 2 * wl <= 1):
                raise ArchitectureError(f"skip {hs}x{ws} cannot be matched from {hl}x{wl}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AeriArchitecture":
        d = dict(d)
        if "input_shape" in d:
            d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class Up(nn.Module):
    """Bilinear upsampling to the skip's size, concatenation, then a conv block.

    With floor pooling the skip is either exactly twice the coarse map or one
    pixel larger, so the interpolation is a x2 upsample up to one row/column.
    """

    def __init__(self, cin, cskip, cout):
        super().__init__()
        self.block = ConvBlock(cin + cskip, cout)

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return self.block(torch.cat([skip, x], dim=1))


class AeriUNet(nn.Module):
    def __init__(self, arch: AeriArchitecture = AeriArchitecture()):
        super().__init__()
        arch.validate()
        self.arch = arch
        ch = arch.channels()
        self.down = nn.ModuleList()
        cin = arch.in_channels
        for c in ch:
            self.down.append(ConvBlock(cin, c))
            cin = c
        self.pool = nn.MaxPool2d(2)
        self.up = nn.ModuleList()
        for c_skip in reversed(ch[:-1]):
            self.up.append(Up(cin, c_skip, c_skip))
            cin = c_skip
        self.head = nn.Conv2d(cin, arch.out_channels, 1)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.arch.in_channels:
            raise ContractError(f"expected (N, {self.arch.in_channels}, H, W) input, got {tuple(x.shape)}")
        skips = []
        for i, block in enumerate(self.down):
            x = block(x if i == 0 else self.pool(x))
            skips.append(x)
        x = skips.pop()
        for up in self.up:
            x = up(x, skips.pop())
        return torch.sigmoid(self.head(x))


def build_aeri(arch: AeriArchitecture = AeriArchitecture(), seed: int = 0) -> AeriUNet:
    """Randomly initialized network; the same seed gives identical weights."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return AeriUNet(arch)


def aeri_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every pixel of both channels and the batch."""
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ")
    return torch.mean((pred - gt.to(pred.dtype)) ** 2)


@dataclass
class AeriTrainConfig:
    lr: float = 1e-5
    batch_size: int = 32
    epochs: int = 30
    step_size: int = 5
    gamma: float = 0.1
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    width_multiplier: float = 1.0
    threshold: float = 0.5
    eval_batch_size: int = 128
    deterministic: bool = True
    dump_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig.from_dict(self.augment)
        self.validate()

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.step_size < 1 or not 0 < self.gamma <= 1:
            raise ConfigError("step_size must be >= 1 and gamma in (0, 1]")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")

    def arch(self) -> AeriArchitecture:
        return AeriArchitecture(width_multiplier=self.width_multiplier)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["augment"] = self.augment.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AeriTrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown aeri keys: {sorted(unknown)}")
        return cls(**d)


def set_deterministic(flag: bool = True) -> None:
    torch.use_deterministic_algorithms(flag)


def _to_input(images) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images, dtype=np.float32) / np.float32(255.0))
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[-2:]) != INPUT_SHAPE:
        raise ContractError(f"expected (N, {INPUT_SHAPE[0]}, {INPUT_SHAPE[1]}) images, got {tuple(x.shape)}")
    return x


@torch.no_grad()
def predict_soft(model: nn.Module, images, batch_size: int = 128) -> np.ndarray:
    """Soft masks (N, 2, H, W) in eval mode; the model's mode is restored."""
    x = _to_input(images)
    was_training = model.training
    model.eval()
    try:
        out = [model(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    finally:
        model.train(was_training)
    if not out:
        return np.zeros((0, 2) + INPUT_SHAPE, np.float32)
    return torch.cat(out).numpy()


@torch.no_grad()
def _evaluate(model, images, masks, threshold, batch_size):
    soft = predict_soft(model, images, batch_size)
    gt = masks.astype(np.float32)
    loss = float(np.mean((soft - gt) ** 2, dtype=np.float64))
    return loss, miou((soft > threshold).astype(np.uint8), masks)


def _dump_diagnostics(cfg, payload: dict) -> str:
    if not cfg.dump_dir:
        return ""
    path = Path(cfg.dump_dir) / f"aeri_failure_{int(time.time())}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, default=str))
    return f" (diagnostics in {path})"


def train_aeri(dataset, cfg: AeriTrainConfig = AeriTrainConfig(), val: EyeArrays | None = None,
               progress=None) -> Checkpoint:
    """Train on the ``train`` split, select the epoch with lowest validation MSE.

    ``dataset`` is a manifest, dataset directory or ``EyeArrays`` with masks.
    When it is a manifest its ``val`` split is used for validation unless
    ``val`` is given. Training images are re-augmented every epoch.
    """
    cfg.validate()
    if isinstance(dataset, EyeArrays):
        train = dataset
    else:
        train = load_dataset(dataset, split="train", with_masks=True)
        if val is None:
            val = load_dataset(dataset, split="val", with_masks=True)
    if len(train) == 0 or train.masks is None:
        raise TrainingError("training set is empty or has no masks")
    if val is not None and len(val) == 0:
        val = None
    set_deterministic(cfg.deterministic)

    arch = cfg.arch()
    model = build_aeri(arch, cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.step_size, gamma=cfg.gamma)
    gen = torch.Generator().manual_seed(cfg.seed)
    targets = torch.as_tensor(train.masks.astype(np.float32))

    history = []
    init = {}
    if val is not None:
        init["val_loss"], init["val_miou"] = _evaluate(model, val.images, val.masks, cfg.threshold,
                                                       cfg.eval_batch_size)
        log.info("aeri untrained: val_loss=%.5f val_miou=%.4f", init["val_loss"], init["val_miou"])
    best = (math.inf, None, 0)
    n = len(train)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            images = augment_batch(train.images, cfg.augment, seed=cfg.seed * 100003 + epoch)
            x_all = _to_input(images)
            order = torch.randperm(n, generator=gen)
            model.train()
            total, seen = 0.0, 0
            for step, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                pred = model(x_all[idx])
                loss = aeri_loss(pred, targets[idx])
                if not torch.isfinite(loss):
                    where = _dump_diagnostics(cfg, {
                        "epoch": epoch, "step": step, "loss": float(loss), "lr": opt.param_groups[0]["lr"],
                        "batch_ids": [train.ids[i] for i in idx.tolist()], "history": history,
                    })
                    raise TrainingError(f"non-finite loss at epoch {epoch} step {step}{where}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                seen += len(idx)
            row = {"epoch": epoch, "train_loss": total / seen, "lr": opt.param_groups[0]["lr"]}
            if val is not None:
                row["val_loss"], row["val_miou"] = _evaluate(model, val.images, val.masks, cfg.threshold,
                                                             cfg.eval_batch_size)
            row["seconds"] = time.perf_counter() - t0
            sched.step()
            history.append(row)
            log.info("aeri epoch %s", json.dumps(row))
            if progress is not None:
                progress(row)
            score = row.get("val_loss", row["train_loss"])
            if score < best[0]:
                best = (score, {k: v.detach().clone() for k, v in model.state_dict().items()}, epoch)

    state = best[1] if best[1] is not None else model.state_dict()
    return Checkpoint(
        kind=KIND,
        arch=arch.to_dict(),
        state_dict=state,
        provenance={"config": cfg.to_dict(), "best_epoch": best[2], "n_train": n,
                    "n_val": 0 if val is None else len(val)},
        log=history,
        extra={"untrained": init},
    )


def load_aeri(ckpt) -> AeriUNet:
    """Build a network from a checkpoint (or path) in eval mode."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt, kind=KIND)
    if ckpt.kind != KIND:
        raise ArchitectureError(f"not an aeri checkpoint: {ckpt.kind!r}")
    model = AeriUNet(AeriArchitecture.from_dict(ckpt.arch))
    try:
        model.load_state_dict(ckpt.state_dict)
    except RuntimeError as exc:
        raise ArchitectureError(f"checkpoint weights do not fit the architecture: {exc}") from exc
    return model.eval()


def freeze(model: nn.Module) -> nn.Module:
    for p in model.parameters():
        p.requires_grad_(False)
    return model.eval()


def export_masks(model, images, threshold: float = 0.5, batch_size: int = 128) -> np.ndarray:
    """Binary masks (N, 2, H, W) uint8 from a frozen forward pass.

    ``model`` is a checkpoint, a checkpoint path or a network; weights are
    never modified.
    """
    if not 0 < threshold < 1:
        raise ContractError(f"threshold must be in (0, 1), got {threshold}")
    if not isinstance(model, nn.Module):
        model = load_aeri(model)
    before = module_checksum(model)
    soft = predict_soft(model, images, batch_size)
    if module_checksum(model) != before:
        raise TrainingError("weights changed during mask export")
    return (soft > threshold).astype(np.uint8)
