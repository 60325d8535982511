"""Domain-randomization transforms for synthetic eye images.

Every transform takes a 2-D float image with values in [0, 255] and returns
a new image of the same shape, clamped to [0, 255]. None of them moves
content geometrically, so masks computed for the clean image stay valid.
Images are kept in floating point; quantize only when saving.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F

from . import kernels
from .errors import ConfigError

TRANSFORM_ORDER = ("contrast", "blur", "downscale", "noise", "lines", "cutout")


def _clamp(image):
    return np.clip(image, 0.0, 255.0)


def _as_image(image):
    im = np.array(image, dtype=np.float64, copy=True)
    if im.ndim != 2:
        raise ConfigError(f"expected a 2-D image, got shape {im.shape}")
    return im


def _check_range(name, value, lo, hi):
    if not (lo <= value <= hi):
        raise ConfigError(f"{name}={value} outside [{lo}, {hi}]")


def gaussian_noise(image, sigma: float, rng: np.random.Generator):
    _check_range("noise sigma", sigma, 0.0, 10.0)
    im = _as_image(image)
    if sigma == 0:
        return _clamp(im)
    return _clamp(im + rng.normal(0.0, sigma, size=im.shape))


def gaussian_blur(image, sigma: float, rng: np.random.Generator | None = None):
    """3x3 normalized Gaussian with reflected borders; sigma 0 is the identity."""
    _check_range("blur sigma", sigma, 0.0, 2.0)
    im = _as_image(image)
    if sigma == 0:
        return _clamp(im)
    k = np.exp(-np.array([1.0, 0.0, 1.0]) / (2.0 * sigma * sigma))
    k /= k.sum()
    padded = np.pad(im, 1, mode="reflect")
    rows = k[0] * padded[:-2] + k[1] * padded[1:-1] + k[2] * padded[2:]
    out = k[0] * rows[:, :-2] + k[1] * rows[:, 1:-1] + k[2] * rows[:, 2:]
    return _clamp(out)


def cutout(image, rng: np.random.Generator, height=None, width=None, top=None, left=None,
           max_side: int = 10):
    """Zero one axis-aligned rectangle with sides drawn from [1, max_side]."""
    im = _as_image(image)
    rows, cols = im.shape
    h = int(rng.integers(1, max_side, endpoint=True)) if height is None else int(height)
    w = int(rng.integers(1, max_side, endpoint=True)) if width is None else int(width)
    h, w = min(h, rows), min(w, cols)
    r = int(rng.integers(0, rows - h, endpoint=True)) if top is None else int(top)
    c = int(rng.integers(0, cols - w, endpoint=True)) if left is None else int(left)
    im[r:r + h, c:c + w] = 0.0
    return im


def _resize(im, size):
    t = torch.from_numpy(im)[None, None]
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0, 0].numpy()


def downscale(image, factor: float, rng: np.random.Generator | None = None):
    """Bilinear shrink by (1 - factor) and back to the original size."""
    _check_range("downscale factor", factor, 0.0, 0.5)
    im = _as_image(image)
    rows, cols = im.shape
    small = (max(1, round((1.0 - factor) * rows)), max(1, round((1.0 - factor) * cols)))
    if small == (rows, cols):
        return _clamp(im)
    return _clamp(_resize(_resize(im, small), (rows, cols)))


def _border_point(rng, rows, cols):
    # uniform over the distinct border pixels
    perimeter = 2 * cols + 2 * (rows - 2)
    k = int(rng.integers(0, perimeter))
    if k < cols:
        return 0, k
    k -= cols
    if k < cols:
        return rows - 1, k
    k -= cols
    return 1 + k // 2, (0 if k % 2 == 0 else cols - 1)


def random_lines(image, rng: np.random.Generator, count=None, intensity=None, max_lines: int = 2):
    """Draw 0..max_lines one-pixel lines between random border points."""
    im = np.ascontiguousarray(_as_image(image))
    rows, cols = im.shape
    n = int(rng.integers(0, max_lines, endpoint=True)) if count is None else int(count)
    for _ in range(n):
        r0, c0 = _border_point(rng, rows, cols)
        r1, c1 = _border_point(rng, rows, cols)
        value = float(rng.uniform(0.0, 255.0)) if intensity is None else float(intensity)
        kernels.draw_line(im, r0, c0, r1, c1, value)
    return _clamp(im)


def contrast_change(image, r_min: float, r_max: float, rng: np.random.Generator | None = None):
    """Affine remap of [0, 255] onto [r_min, r_max]."""
    _check_range("r_min", r_min, 0.0, 100.0)
    _check_range("r_max", r_max, 155.0, 255.0)
    im = _as_image(image)
    return _clamp(r_min + im * ((r_max - r_min) / 255.0))  # scale is exactly 1 for (0, 255)


@dataclass
class AugmentConfig:
    """Which transforms run, how often, and over which parameter ranges."""

    noise: bool = True
    blur: bool = True
    cutout: bool = True
    downscale: bool = True
    lines: bool = True
    contrast: bool = True
    probability: dict = field(default_factory=lambda: {k: 0.5 for k in TRANSFORM_ORDER})
    noise_sigma: tuple = (0.0, 10.0)
    blur_sigma: tuple = (0.0, 2.0)
    cutout_side: tuple = (1, 10)
    downscale_factor: tuple = (0.0, 0.5)
    line_count: tuple = (0, 2)
    contrast_min: tuple = (0.0, 100.0)
    contrast_max: tuple = (155.0, 255.0)
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(**{k: False for k in TRANSFORM_ORDER})

    @classmethod
    def only(cls, *names: str) -> "AugmentConfig":
        for n in names:
            if n not in TRANSFORM_ORDER:
                raise ConfigError(f"unknown transform {n!r}")
        return cls(**{k: (k in names) for k in TRANSFORM_ORDER})

    def enabled(self) -> list[str]:
        return [k for k in TRANSFORM_ORDER if getattr(self, k)]

    def validate(self) -> None:
        probs = {k: 0.5 for k in TRANSFORM_ORDER}
        unknown = set(self.probability) - set(TRANSFORM_ORDER)
        if unknown:
            raise ConfigError(f"unknown transforms in probability: {sorted(unknown)}")
        probs.update(self.probability)
        self.probability = probs
        for k, p in probs.items():
            _check_range(f"probability[{k}]", p, 0.0, 1.0)
        bounds = {
            "noise_sigma": (0.0, 10.0),
            "blur_sigma": (0.0, 2.0),
            "cutout_side": (1, 10),
            "downscale_factor": (0.0, 0.5),
            "line_count": (0, 2),
            "contrast_min": (0.0, 100.0),
            "contrast_max": (155.0, 255.0),
        }
        for name, (lo, hi) in bounds.items():
            a, b = getattr(self, name)
            if a > b or a < lo or b > hi:
                raise ConfigError(f"{name}={[a, b]} must be an ordered sub-range of [{lo}, {hi}]")
            setattr(self, name, (a, b))

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown augment keys: {sorted(unknown)}")
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**kw)


def apply_random(image, config: AugmentConfig, rng: np.random.Generator):
    """Apply each enabled transform with its probability, in TRANSFORM_ORDER.

    A Bernoulli draw is consumed for every transform (enabled or not), so
    toggling one transform does not reshuffle the randomness of the others'
    gates.
    """
    im = _as_image(image)
    for name in TRANSFORM_ORDER:
        gate = rng.random()
        if not getattr(config, name) or gate >= config.probability[name]:
            continue
        if name == "contrast":
            im = contrast_change(im, rng.uniform(*config.contrast_min), rng.uniform(*config.contrast_max))
        elif name == "blur":
            im = gaussian_blur(im, rng.uniform(*config.blur_sigma))
        elif name == "downscale":
            im = downscale(im, rng.uniform(*config.downscale_factor))
        elif name == "noise":
            im = gaussian_noise(im, rng.uniform(*config.noise_sigma), rng)
        elif name == "lines":
            lo, hi = config.line_count
            im = random_lines(im, rng, count=int(rng.integers(lo, hi, endpoint=True)))
        elif name == "cutout":
            lo, hi = config.cutout_side
            im = cutout(
                im, rng,
                height=int(rng.integers(lo, hi, endpoint=True)),
                width=int(rng.integers(lo, hi, endpoint=True)),
            )
    return _clamp(im)


def augment_batch(images, config: AugmentConfig, seed: int) -> np.ndarray:
    """Augment (N, H, W) images; sample i uses a generator seeded with (seed, i)."""
    images = np.asarray(images, dtype=np.float64)
    out = np.empty_like(images)
    for i, im in enumerate(images):
        out[i] = apply_random(im, config, np.random.default_rng([seed, i]))
    return out


def single_transform_ablation() -> list[tuple[str, AugmentConfig]]:
    """Augmentation ablation rows: none, each transform alone, then all."""
    rows = [("none", AugmentConfig.disabled())]
    for name in ("noise", "blur", "cutout", "downscale", "lines", "contrast"):
        rows.append((name, AugmentConfig.only(name)))
    rows.append(("all", AugmentConfig()))
    return rows

