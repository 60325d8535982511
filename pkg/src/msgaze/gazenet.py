"""Multistream gaze regressor.

Three wide-residual streams encode the eye image, the iris mask and the
visible-eyeball mask. Their feature maps are concatenated along channels,
passed through a shared trunk, pooled, and regressed to (pitch, yaw).

The topology is described by a declarative :class:`GazeArchitecture` so
that ablation variants are edits of the plan, not separate classes.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import aeri as aeri_mod
from .augment import AugmentConfig, augment_batch
from .checkpoint import Checkpoint, module_checksum
from .data import EyeArrays
from .errors import ArchitectureError, ConfigError, ContractError, TrainingError
from .metrics import angular_error

log = logging.getLogger(__name__)

KIND = "gaze"
INPUTS = ("image", "iris", "visible")
VARIANTS = (
    "full",
    "no_masks",
    "no_image",
    "no_visible",
    "no_iris",
    "single_encoder",
    "two_encoder",
    "shared_weights",
    "late_fusion",
    "early_fusion",
    "shallow_minus_block2",
    "shallow_minus_blocks23",
)
# kernel sizes of the two wide residual blocks that make up one conv block
BLOCK_KERNELS = ((3, 1, 3), (3, 3))


@dataclass(frozen=True)
class GazeArchitecture:
    """Plan of the network.

    ``groups`` lists the conv blocks that exist (0, 1, 2 for blocks 1..3);
    the first ``fusion_after`` of them run inside every stream and the rest
    form the trunk after concatenation.
    """

    streams: tuple = (("image",), ("iris",), ("visible",))
    groups: tuple = (0, 1, 2)
    fusion_after: int = 2
    shared_weights: bool = False
    widen_factor: int = 4
    stem_channels: int = 16
    group_channels: tuple = (16, 32, 64)
    strides: tuple = (1, 2, 2)
    dropout: float = 0.5
    leaky_slope: float = 0.01
    fc_widths: tuple = (256, 128, 2)
    fc_dropout: float = 0.25
    kind: str = "full"

    def validate(self) -> None:
        if not self.streams:
            raise ArchitectureError("at least one stream is required")
        for s in self.streams:
            if not s or any(name not in INPUTS for name in s):
                raise ArchitectureError(f"bad stream inputs {s!r}; allowed {INPUTS}")
        if list(self.groups) != sorted(set(self.groups)) or any(g not in (0, 1, 2) for g in self.groups):
            raise ArchitectureError(f"groups must be increasing indices in 0..2, got {self.groups}")
        if not 0 <= self.fusion_after <= len(self.groups):
            raise ArchitectureError(f"fusion_after={self.fusion_after} outside 0..{len(self.groups)}")
        if self.shared_weights and len({len(s) for s in self.streams}) != 1:
            raise ArchitectureError("shared weights need streams with equal input channels")
        if self.widen_factor < 1:
            raise ArchitectureError("widen_factor must be >= 1")
        if len(self.fc_widths) < 1 or self.fc_widths[-1] != 2:
            raise ArchitectureError(f"fc_widths must end in 2, got {self.fc_widths}")
        if not (0 <= self.dropout < 1 and 0 <= self.fc_dropout < 1):
            raise ArchitectureError("dropout rates must be in [0, 1)")

    def group_out(self, g: int) -> int:
        return self.group_channels[g] * self.widen_factor

    def stream_groups(self) -> tuple:
        return tuple(self.groups[: self.fusion_after])

    def trunk_groups(self) -> tuple:
        return tuple(self.groups[self.fusion_after:])

    def stream_width(self) -> int:
        sg = self.stream_groups()
        return self.group_out(sg[-1]) if sg else self.stem_channels

    def fusion_width(self) -> int:
        return self.stream_width() * len(self.streams)

    def feature_width(self) -> int:
        tg = self.trunk_groups()
        return self.group_out(tg[-1]) if tg else self.fusion_width()

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: _listify(v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GazeArchitecture":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**{k: _tuplify(v) for k, v in d.items()})


def _listify(v):
    return [_listify(x) for x in v] if isinstance(v, (list, tuple)) else v


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, (list, tuple)) else v


def variant_architecture(kind: str, base: GazeArchitecture = GazeArchitecture()) -> GazeArchitecture:
    """Edit the base plan as named by ``kind``."""
    edits = {
        "full": {},
        "no_masks": {"streams": (("image",),)},
        "no_image": {"streams": (("iris",), ("visible",))},
        "no_visible": {"streams": (("image",), ("iris",))},
        "no_iris": {"streams": (("image",), ("visible",))},
        "single_encoder": {"streams": (("image", "iris", "visible"),)},
        "two_encoder": {"streams": (("image",), ("iris", "visible"))},
        "shared_weights": {"shared_weights": True},
        "late_fusion": {"fusion_after": 3},
        "early_fusion": {"fusion_after": 1},
        "shallow_minus_block2": {"groups": (0, 2), "fusion_after": 1},
        "shallow_minus_blocks23": {"groups": (0,), "fusion_after": 1},
    }
    if kind not in edits:
        raise ArchitectureError(f"unknown variant {kind!r}; expected one of {', '.join(VARIANTS)}")
    arch = replace(base, kind=kind, **edits[kind])
    arch.validate()
    return arch


class WideResidualBlock(nn.Module):
    """Pre-activation residual block whose convolutions have the given kernel sizes.

    Dropout sits after the first convolution; the first convolution carries
    the stride. A 1x1 projection shortcut is used when shape changes.
    """

    def __init__(self, cin, cout, kernels=(3, 3), stride=1, dropout=0.0, slope=0.01):
        super().__init__()
        layers = []
        c = cin
        for j, k in enumerate(kernels):
            layers += [
                nn.BatchNorm2d(c),
                nn.LeakyReLU(slope),
                nn.Conv2d(c, cout, k, stride=stride if j == 0 else 1, padding=k // 2, bias=False),
            ]
            if j == 0 and dropout > 0 and len(kernels) > 1:
                layers.append(nn.Dropout(dropout))
            c = cout
        self.body = nn.Sequential(*layers)
        self.shortcut = None
        if cin != cout or stride != 1:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride=stride, bias=False)

    def forward(self, x):
        skip = x if self.shortcut is None else self.shortcut(x)
        return self.body(x) + skip


def conv_block(cin, cout, stride, arch: GazeArchitecture) -> nn.Sequential:
    first, second = BLOCK_KERNELS
    return nn.Sequential(
        WideResidualBlock(cin, cout, first, stride, arch.dropout, arch.leaky_slope),
        WideResidualBlock(cout, cout, second, 1, arch.dropout, arch.leaky_slope),
    )


class Stream(nn.Module):
    def __init__(self, in_channels: int, arch: GazeArchitecture):
        super().__init__()
        self.stem = nn.Conv2d(in_channels, arch.stem_channels, 3, padding=1, bias=False)
        blocks, c = [], arch.stem_channels
        for g in arch.stream_groups():
            blocks.append(conv_block(c, arch.group_out(g), arch.strides[g], arch))
            c = arch.group_out(g)
        self.blocks = nn.Sequential(*blocks)
        self.out_channels = c

    def forward(self, x):
        return self.blocks(self.stem(x))


class MultiStreamGazeNet(nn.Module):
    """Input is (N, 3, H, W) with channels [image, iris, visible]."""

    def __init__(self, arch: GazeArchitecture = GazeArchitecture()):
        super().__init__()
        arch.validate()
        self.arch = arch
        self.input_index = [[INPUTS.index(name) for name in s] for s in arch.streams]
        if arch.shared_weights:
            shared = Stream(len(arch.streams[0]), arch)
            self.streams = nn.ModuleList([shared])
        else:
            self.streams = nn.ModuleList([Stream(len(s), arch) for s in arch.streams])
        widths = {m.out_channels for m in self.streams}
        if len(widths) != 1:
            raise ArchitectureError(f"streams disagree on output channels: {sorted(widths)}")
        fused = widths.pop() * len(arch.streams)
        if fused != arch.fusion_width():
            raise ArchitectureError(f"fusion width {fused} != planned {arch.fusion_width()}")
        trunk, c = [], fused
        for g in arch.trunk_groups():
            trunk.append(conv_block(c, arch.group_out(g), arch.strides[g], arch))
            c = arch.group_out(g)
        self.trunk = nn.Sequential(*trunk)
        self.post = nn.Sequential(nn.BatchNorm2d(c), nn.LeakyReLU(arch.leaky_slope))
        fc, cin = [], c
        for i, width in enumerate(arch.fc_widths):
            fc.append(nn.Linear(cin, width))
            if i < len(arch.fc_widths) - 1:
                fc += [nn.ReLU(inplace=True), nn.Dropout(arch.fc_dropout)]
            cin = width
        self.head = nn.Sequential(*fc)

    def stream_modules(self) -> list[nn.Module]:
        """One module per stream; shared-weight plans return the same object."""
        if self.arch.shared_weights:
            return [self.streams[0]] * len(self.arch.streams)
        return list(self.streams)

    def forward(self, x, iris=None, visible=None):
        if iris is not None or visible is not None:
            x = torch.cat([x, iris, visible], dim=1)
        if x.ndim != 4 or x.shape[1] != len(INPUTS):
            raise ContractError(f"expected (N, 3, H, W) input, got {tuple(x.shape)}")
        feats = [m(x[:, idx]) for m, idx in zip(self.stream_modules(), self.input_index)]
        h = self.post(self.trunk(torch.cat(feats, dim=1)))
        return self.head(h.mean(dim=(2, 3)))


def build_msgazenet(arch: GazeArchitecture = GazeArchitecture(), fc_widths=None, seed: int = 0):
    if fc_widths is not None:
        arch = replace(arch, fc_widths=tuple(fc_widths))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MultiStreamGazeNet(arch)


def build_variant(kind: str, base: GazeArchitecture = GazeArchitecture(), seed: int = 0):
    return build_msgazenet(variant_architecture(kind, base), seed=seed)


def count_parameters(model: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def gaze_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the squared Euclidean distance between angle pairs."""
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ContractError(f"expected matching (n, 2) tensors, got {tuple(pred.shape)} and {tuple(gt.shape)}")
    return torch.sum((pred - gt.to(pred.dtype)) ** 2, dim=1).mean()


@dataclass
class GazeTrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    fc_widths: tuple = (256, 128, 2)
    kind: str = "full"
    widen_factor: int = 4
    dropout: float = 0.5
    fc_dropout: float = 0.25
    seed: int = 0
    threshold: float = 0.5
    max_steps: int | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig.disabled)
    eval_batch_size: int = 256
    deterministic: bool = True
    dump_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig.from_dict(self.augment)
        self.fc_widths = tuple(self.fc_widths)
        self.validate()

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0 < self.plateau_factor < 1 or self.plateau_patience < 0:
            raise ConfigError("plateau factor must be in (0, 1) and patience >= 0")
        if not self.fc_widths or self.fc_widths[-1] != 2:
            raise ConfigError(f"fc_widths must end in 2, got {self.fc_widths}")
        if self.kind not in VARIANTS:
            raise ConfigError(f"unknown variant {self.kind!r}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must be in (0, 1)")

    def arch(self) -> GazeArchitecture:
        base = GazeArchitecture(widen_factor=self.widen_factor, dropout=self.dropout,
                                fc_dropout=self.fc_dropout, fc_widths=self.fc_widths)
        return variant_architecture(self.kind, base)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["augment"] = self.augment.to_dict()
        d["fc_widths"] = list(self.fc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GazeTrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown gaze keys: {sorted(unknown)}")
        return cls(**d)


class Normalizer:
    """Scale images to [0, 1], then standardize with dataset statistics."""

    def __init__(self, mean: float, std: float):
        self.mean, self.std = float(mean), float(std)

    @classmethod
    def fit(cls, images) -> "Normalizer":
        x = np.asarray(images, dtype=np.float64) / 255.0
        return cls(x.mean(), max(x.std(), 1e-6))

    def __call__(self, images) -> torch.Tensor:
        x = np.asarray(images, dtype=np.float32) / np.float32(255.0)
        return torch.as_tensor((x - np.float32(self.mean)) / np.float32(self.std))

    def to_dict(self):
        return {"mean": self.mean, "std": self.std}


class GazePipeline(nn.Module):
    """Frozen mask network followed by the trainable gaze network.

    When masks are not supplied they are produced on the fly by the frozen
    network and binarized at ``threshold``.
    """

    def __init__(self, gaze: MultiStreamGazeNet, aeri: nn.Module | None, normalizer: Normalizer,
                 threshold: float = 0.5):
        super().__init__()
        self.gaze = gaze
        self.aeri = None if aeri is None else aeri_mod.freeze(aeri)
        self.normalizer = normalizer
        self.threshold = threshold

    def train(self, mode: bool = True):
        super().train(mode)
        if self.aeri is not None:
            self.aeri.eval()  # batch-norm statistics stay frozen too
        return self

    def masks_for(self, images) -> torch.Tensor:
        if self.aeri is None:
            raise ContractError("masks were not supplied and the pipeline has no mask network")
        soft = self.aeri(aeri_mod._to_input(images))
        return (soft > self.threshold).to(torch.float32)

    def forward(self, images, masks=None):
        images = np.asarray(images)
        if images.ndim != 3 or images.shape[1:] != aeri_mod.INPUT_SHAPE:
            raise ContractError(f"expected (N, 36, 60) images, got {images.shape}")
        m = self.masks_for(images) if masks is None else torch.as_tensor(np.asarray(masks), dtype=torch.float32)
        if m.shape != (len(images), 2) + aeri_mod.INPUT_SHAPE:
            raise ContractError(f"expected (N, 2, 36, 60) masks, got {tuple(m.shape)}")
        x = torch.cat([self.normalizer(images)[:, None], m], dim=1)
        return self.gaze(x)


def aeri_grad_norm(pipeline: GazePipeline) -> float:
    """Total gradient norm over the mask network (absent gradients count as 0)."""
    if pipeline.aeri is None:
        return 0.0
    total = 0.0
    for p in pipeline.aeri.parameters():
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


@torch.no_grad()
def _predict(pipeline: GazePipeline, images, masks, batch_size) -> np.ndarray:
    was = pipeline.training
    pipeline.eval()
    try:
        out = []
        for i in range(0, len(images), batch_size):
            m = None if masks is None else masks[i:i + batch_size]
            out.append(pipeline(images[i:i + batch_size], m).double().numpy())
    finally:
        pipeline.train(was)
    return np.concatenate(out) if out else np.zeros((0, 2))


def _load_aeri_arg(aeri):
    if aeri is None or isinstance(aeri, nn.Module):
        return aeri
    return aeri_mod.load_aeri(aeri)


def train_gaze(data: EyeArrays, cfg: GazeTrainConfig = GazeTrainConfig(), aeri=None,
               val: EyeArrays | None = None, step_callback=None) -> Checkpoint:
    """Train the gaze network with a frozen mask network in front of it.

    ``data.masks`` (exported masks) are used when present; otherwise masks
    come from ``aeri`` on the fly. ``step_callback(step, pipeline, loss)`` is
    called after every optimizer step.
    """
    cfg.validate()
    if len(data) == 0 or data.gaze is None:
        raise TrainingError("training set is empty or unlabeled")
    if data.masks is None and aeri is None:
        raise TrainingError("either exported masks or a mask network is required")
    aeri_net = _load_aeri_arg(aeri)
    aeri_mod.set_deterministic(cfg.deterministic)

    arch = cfg.arch()
    net = build_msgazenet(arch, seed=cfg.seed)
    norm = Normalizer.fit(data.images)
    pipe = GazePipeline(net, aeri_net, norm, cfg.threshold)
    aeri_sum = None if pipe.aeri is None else module_checksum(pipe.aeri)

    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=cfg.plateau_factor, patience=cfg.plateau_patience)
    gen = torch.Generator().manual_seed(cfg.seed)
    targets = torch.as_tensor(data.gaze, dtype=torch.float32)
    use_aug = bool(cfg.augment.enabled())

    history, step, n = [], 0, len(data)
    best = (math.inf, None, 0)
    done = False
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            images = data.images
            if use_aug:
                images = np.clip(np.rint(augment_batch(images, cfg.augment, cfg.seed * 100003 + epoch)), 0, 255)
            pipe.train()
            order = torch.randperm(n, generator=gen)
            total, seen = 0.0, 0
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size].numpy()
                masks = None if data.masks is None else data.masks[idx]
                pred = pipe(images[idx], masks)
                loss = gaze_loss(pred, targets[idx])
                if not torch.isfinite(loss):
                    where = ""
                    if cfg.dump_dir:
                        path = Path(cfg.dump_dir) / f"gaze_failure_{int(time.time())}.json"
                        path.parent.mkdir(parents=True, exist_ok=True)
                        path.write_text(json.dumps({
                            "epoch": epoch, "step": step, "loss": float(loss),
                            "batch_ids": [data.ids[i] for i in idx], "history": history}, default=str))
                        where = f" (diagnostics in {path})"
                    raise TrainingError(f"non-finite loss at epoch {epoch} step {step}{where}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                step += 1
                total += loss.item() * len(idx)
                seen += len(idx)
                if step_callback is not None:
                    step_callback(step, pipe, loss.item())
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    done = True
                    break
            row = {"epoch": epoch, "steps": step, "train_loss": total / seen, "lr": opt.param_groups[0]["lr"]}
            if val is not None and len(val):
                pred = _predict(pipe, val.images, val.masks, cfg.eval_batch_size)
                row["val_loss"] = float(np.mean(np.sum((pred - val.gaze) ** 2, axis=1)))
                row["val_mean_error"] = float(np.mean(angular_error(val.gaze, pred)))
            row["seconds"] = time.perf_counter() - t0
            history.append(row)
            log.info("gaze epoch %s", json.dumps(row))
            score = row.get("val_loss", row["train_loss"])
            sched.step(score)
            if score < best[0]:
                best = (score, {k: v.detach().clone() for k, v in net.state_dict().items()}, epoch)
            if done:
                break

    if aeri_sum is not None and module_checksum(pipe.aeri) != aeri_sum:
        raise TrainingError("mask network weights changed during gaze training")
    extra = {"normalizer": norm.to_dict(), "threshold": cfg.threshold, "aeri": None}
    if pipe.aeri is not None:
        extra["aeri"] = {
            "arch": pipe.aeri.arch.to_dict(),
            "state_dict": pipe.aeri.state_dict(),
            "checksum": aeri_sum,
        }
    return Checkpoint(
        kind=KIND,
        arch=arch.to_dict(),
        state_dict=best[1] if best[1] is not None else net.state_dict(),
        provenance={"config": cfg.to_dict(), "best_epoch": best[2], "steps": step, "n_train": n,
                    "aeri_checksum": aeri_sum},
        log=history,
        extra=extra,
    )


def load_pipeline(ckpt) -> GazePipeline:
    """Rebuild the full inference pipeline from a gaze checkpoint (or path)."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt, kind=KIND)
    if ckpt.kind != KIND:
        raise ArchitectureError(f"not a gaze checkpoint: {ckpt.kind!r}")
    net = MultiStreamGazeNet(GazeArchitecture.from_dict(ckpt.arch))
    net.load_state_dict(ckpt.state_dict)
    aeri = None
    info = ckpt.extra.get("aeri")
    if info:
        aeri = aeri_mod.AeriUNet(aeri_mod.AeriArchitecture.from_dict(info["arch"]))
        aeri.load_state_dict(info["state_dict"])
    norm = Normalizer(**ckpt.extra["normalizer"])
    return GazePipeline(net, aeri, norm, ckpt.extra.get("threshold", 0.5)).eval()


def predict_gaze(model, images, masks=None, batch_size: int = 256) -> np.ndarray:
    """(N, 2) pitch/yaw predictions in radians, eval mode."""
    pipe = model if isinstance(model, GazePipeline) else load_pipeline(model)
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
        masks = None if masks is None else np.asarray(masks)[None]
    return _predict(pipe, images, masks, batch_size)
