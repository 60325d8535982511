"""Procedural synthetic eye images with exact landmark and gaze ground truth.

The renderer is orthographic and layered: skin, the eyelid-bounded sclera,
an iris disk with a darker pupil, and a global light gain. The iris is the
projection of a circle on an eyeball sphere rotated to the gaze direction,
so the landmarks follow analytically from the scene parameters.

Coordinates are pixels with the origin at the top-left corner, x to the
right and y down; pixel ``(row, col)`` covers ``[col, col+1) x [row, row+1)``.
"""
from __future__ import annotations

import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import maskgen
from .errors import ConfigError, DataIOError, RenderError

log = logging.getLogger(__name__)

HEIGHT, WIDTH = 36, 60
GENERATOR_VERSION = "msgaze-synth/1"

GAZE_PITCH_LIMIT = math.radians(49.49)
GAZE_YAW_LIMIT = math.radians(78.28)
HEAD_PITCH_LIMIT = math.radians(20.0)
HEAD_YAW_LIMIT = math.radians(40.0)
LIGHT_LIMITS = (0.60, 1.20)

# eyeball radius relative to iris radius (iris subtends 30 deg from the eyeball center)
EYEBALL_TO_IRIS = 2.0
PUPIL_FRACTION = 0.4
SUPERSAMPLE = 3


@dataclass(frozen=True)
class EyeSceneParams:
    gaze: tuple[float, float]
    head_pose: tuple[float, float]
    light_intensity: float
    iris_radius_px: float
    eyeball_center_px: tuple[float, float]
    aperture: float
    texture_seed: int
    left_eye: bool = False

    def mirrored(self) -> "EyeSceneParams":
        """The same scene seen in a horizontal mirror (the other eye)."""
        return replace(
            self,
            gaze=(self.gaze[0], -self.gaze[1]),
            head_pose=(self.head_pose[0], -self.head_pose[1]),
            eyeball_center_px=(WIDTH - self.eyeball_center_px[0], self.eyeball_center_px[1]),
            left_eye=not self.left_eye,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gaze"] = list(self.gaze)
        d["head_pose"] = list(self.head_pose)
        d["eyeball_center_px"] = list(self.eyeball_center_px)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EyeSceneParams":
        return cls(
            gaze=tuple(d["gaze"]),
            head_pose=tuple(d["head_pose"]),
            light_intensity=float(d["light_intensity"]),
            iris_radius_px=float(d["iris_radius_px"]),
            eyeball_center_px=tuple(d["eyeball_center_px"]),
            aperture=float(d["aperture"]),
            texture_seed=int(d["texture_seed"]),
            left_eye=bool(d.get("left_eye", False)),
        )


@dataclass(frozen=True)
class SceneRanges:
    """Closed sampling intervals (lo, hi) for every scene parameter."""

    gaze_pitch: tuple[float, float] = (-GAZE_PITCH_LIMIT, GAZE_PITCH_LIMIT)
    gaze_yaw: tuple[float, float] = (-GAZE_YAW_LIMIT, GAZE_YAW_LIMIT)
    head_pitch: tuple[float, float] = (-HEAD_PITCH_LIMIT, HEAD_PITCH_LIMIT)
    head_yaw: tuple[float, float] = (-HEAD_YAW_LIMIT, HEAD_YAW_LIMIT)
    light_intensity: tuple[float, float] = LIGHT_LIMITS
    iris_radius_px: tuple[float, float] = (4.5, 6.5)
    center_x: tuple[float, float] = (27.0, 33.0)
    center_y: tuple[float, float] = (16.5, 19.5)
    aperture: tuple[float, float] = (0.6, 1.0)
    texture_seed: tuple[int, int] = (0, 2**31 - 1)
    left_eye_prob: float = 0.5

    @classmethod
    def collapsed(cls, value: float = 0.0) -> "SceneRanges":
        v = (value, value)
        return cls(v, v, v, v, v, v, v, v, v, (int(value), int(value)), 0.0)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneRanges":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scene range keys: {sorted(unknown)}")
        kw = {k: (float(v) if k == "left_eye_prob" else tuple(v)) for k, v in d.items()}
        if "texture_seed" in kw:
            kw["texture_seed"] = tuple(int(x) for x in kw["texture_seed"])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    def validate(self) -> None:
        bounded = {
            "gaze_pitch": GAZE_PITCH_LIMIT,
            "gaze_yaw": GAZE_YAW_LIMIT,
            "head_pitch": HEAD_PITCH_LIMIT,
            "head_yaw": HEAD_YAW_LIMIT,
        }
        for name in self.__dataclass_fields__:
            if name == "left_eye_prob":
                continue
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ConfigError(f"{name}: non-finite bound")
            if lo > hi:
                raise ConfigError(f"{name}: min {lo} > max {hi}")
            if name in bounded and (lo < -bounded[name] - 1e-12 or hi > bounded[name] + 1e-12):
                raise ConfigError(f"{name}: [{lo}, {hi}] exceeds +/-{bounded[name]:.6f} rad")
        if not 0.0 <= self.left_eye_prob <= 1.0:
            raise ConfigError("left_eye_prob must lie in [0, 1]")


def sample_scene(rng: np.random.Generator, ranges: SceneRanges = SceneRanges()) -> EyeSceneParams:
    """Draw every parameter uniformly and independently from ``ranges``."""
    ranges.validate()
    u = lambda lo_hi: float(rng.uniform(lo_hi[0], lo_hi[1]))  # noqa: E731
    gaze = (u(ranges.gaze_pitch), u(ranges.gaze_yaw))
    head = (u(ranges.head_pitch), u(ranges.head_yaw))
    light = u(ranges.light_intensity)
    radius = u(ranges.iris_radius_px)
    center = (u(ranges.center_x), u(ranges.center_y))
    aperture = u(ranges.aperture)
    lo, hi = ranges.texture_seed
    seed = int(rng.integers(lo, hi, endpoint=True))
    left = bool(rng.random() < ranges.left_eye_prob)
    return EyeSceneParams(gaze, head, light, radius, center, aperture, seed, left)


@dataclass
class SynthSample:
    image: np.ndarray  # (36, 60) uint8
    iris_landmarks: np.ndarray  # (32, 2)
    interior_landmarks: np.ndarray  # (16, 2)
    caruncle_landmarks: np.ndarray  # (6, 2)
    gaze: tuple[float, float]
    params: EyeSceneParams

    def label_dict(self) -> dict:
        return {
            "gaze": list(self.gaze),
            "head_pose": list(self.params.head_pose),
            "iris_landmarks": self.iris_landmarks.tolist(),
            "interior_landmarks": self.interior_landmarks.tolist(),
            "caruncle_landmarks": self.caruncle_landmarks.tolist(),
            "light": self.params.light_intensity,
            "params": self.params.to_dict(),
        }

    def mask_pair(self) -> maskgen.MaskPair:
        return maskgen.make_mask_pair(
            self.iris_landmarks, self.interior_landmarks, self.caruncle_landmarks
        )


# ---------------------------------------------------------------- geometry


@dataclass(frozen=True)
class _Geometry:
    iris_center: np.ndarray  # projected iris disk center (x, y)
    iris_axes: np.ndarray  # 2x2, columns = projected unit-circle basis * radius
    outer: np.ndarray  # outer eye corner
    inner: np.ndarray  # inner eye corner
    upper_height: float
    lower_height: float


def _geometry(p: EyeSceneParams) -> _Geometry:
    pitch, yaw = p.gaze
    r = p.iris_radius_px
    big_r = EYEBALL_TO_IRIS * r
    cos_a = math.sqrt(1.0 - (r / big_r) ** 2)
    c = np.asarray(p.eyeball_center_px, dtype=np.float64)
    d = np.array([-math.cos(pitch) * math.sin(yaw), -math.sin(pitch)])
    # basis of the iris plane, perpendicular to the gaze direction
    u = np.array([math.cos(yaw), 0.0])
    v = np.array([math.sin(pitch) * math.sin(yaw), -math.cos(pitch)])
    iris_center = c + big_r * cos_a * d

    hp, hy = p.head_pose
    head_dir = np.array([-math.cos(hp) * math.sin(hy), -math.sin(hp)])
    # lids are carried by the head and partly track the gaze
    lid_center = c + big_r * (0.35 * head_dir + 0.45 * d)
    half_width = 1.2 * big_r * math.cos(hy)
    tilt = 0.6  # inner corner sits slightly lower than the outer corner
    outer = lid_center + np.array([-half_width, -tilt / 2])
    inner = lid_center + np.array([half_width, tilt / 2])
    upper = p.aperture * 1.1 * r * math.cos(hp)
    lower = p.aperture * 0.8 * r * math.cos(hp)
    return _Geometry(iris_center, r * np.column_stack([u, v]), outer, inner, upper, lower)


def _lid_curves(g: _Geometry, t):
    """Upper and lower lid y, and baseline x, at fractions t along outer->inner."""
    x = g.outer[0] + t * (g.inner[0] - g.outer[0])
    base = g.outer[1] + t * (g.inner[1] - g.outer[1])
    bump = 4.0 * t * (1.0 - t)
    return x, base - g.upper_height * bump, base + g.lower_height * bump


def _iris_landmarks(g: _Geometry) -> np.ndarray:
    ax = g.iris_axes
    theta0 = math.atan2(ax[0, 1], ax[0, 0])  # rightmost point of the ellipse
    # decreasing image-y first: counterclockwise as seen on screen
    theta = theta0 + 2.0 * np.pi * np.arange(32) / 32
    circ = np.stack([np.cos(theta), np.sin(theta)])
    return (g.iris_center[:, None] + ax @ circ).T


def _contour_landmarks(g: _Geometry) -> np.ndarray:
    t = np.arange(1, 8) / 8.0
    x, up, low = _lid_curves(g, t)
    upper = np.column_stack([x, up])
    lower = np.column_stack([x, low])[::-1]
    return np.vstack([g.outer[None], upper, g.inner[None], lower])


def _caruncle_landmarks(g: _Geometry, rng: np.random.Generator) -> np.ndarray:
    anchor = g.inner + np.array([-1.2, 0.4])
    offsets = np.array([[0.0, -0.8], [0.7, -0.4], [0.7, 0.4], [0.0, 0.8], [-0.7, 0.4], [-0.7, -0.4]])
    return anchor + offsets + rng.normal(0.0, 0.5, size=(6, 2))


# ---------------------------------------------------------------- shading


def _smooth_field(rng: np.random.Generator, xs, ys, n_waves=4, amplitude=1.0):
    out = np.zeros_like(xs)
    for _ in range(n_waves):
        kx, ky = rng.uniform(-0.35, 0.35, size=2)
        out += np.cos(kx * xs + ky * ys + rng.uniform(0, 2 * np.pi))
    return amplitude * out / n_waves


def _render_canonical(p: EyeSceneParams) -> SynthSample:
    g = _geometry(p)
    if g.upper_height + g.lower_height < 1.0:
        raise RenderError(
            f"eyelid contour collapses: aperture={p.aperture:.3f} gives lid opening "
            f"{g.upper_height + g.lower_height:.3f}px (< 1px), upper and lower lids intersect"
        )
    rng = np.random.default_rng(p.texture_seed)
    s = SUPERSAMPLE
    sub = (np.arange(s) + 0.5) / s
    xs = (np.arange(WIDTH)[None, :, None, None] + sub[None, None, None, :])
    ys = (np.arange(HEIGHT)[:, None, None, None] + sub[None, None, :, None])
    xs, ys = np.broadcast_arrays(xs, ys)
    xs = xs.astype(np.float64)
    ys = ys.astype(np.float64)

    # skin
    skin_tone = rng.uniform(100.0, 150.0)
    img = skin_tone + _smooth_field(rng, xs, ys, amplitude=10.0) + rng.uniform(-3, 3, xs.shape)

    # eyelid-bounded region
    span = g.inner[0] - g.outer[0]
    t = (xs - g.outer[0]) / span
    _, up, low = _lid_curves(g, t)
    within = (t > 0.0) & (t < 1.0)
    visible = within & (ys > up) & (ys < low)
    crease = within & (ys < up) & (ys > up - 0.6 * g.upper_height - 2.0)
    img = np.where(crease, img * 0.88, img)
    lash = within & (ys <= up) & (ys > up - 1.2)
    img = np.where(lash, img * 0.45, img)

    sclera_tone = rng.uniform(215.0, 235.0)
    edge = 1.0 - np.abs(2.0 * np.clip(t, 0, 1) - 1.0) ** 2
    sclera = sclera_tone * (0.88 + 0.12 * edge)
    sclera = np.where(ys - up < 1.5, sclera * 0.85, sclera)  # shadow under the upper lid

    # iris and pupil in the iris plane's unit-disk coordinates
    inv = np.linalg.inv(g.iris_axes)
    dx, dy = xs - g.iris_center[0], ys - g.iris_center[1]
    a = inv[0, 0] * dx + inv[0, 1] * dy
    b = inv[1, 0] * dx + inv[1, 1] * dy
    rho = np.hypot(a, b)
    ang = np.arctan2(b, a)
    iris_tone = rng.uniform(70.0, 120.0)
    streaks = 1.0 + 0.12 * np.cos(rng.integers(7, 15) * ang + rng.uniform(0, 2 * np.pi))
    iris = iris_tone * streaks * np.where(rho > 0.85, 0.7, 1.0)
    pupil_tone = rng.uniform(20.0, 35.0)
    eye = np.where(rho <= 1.0, np.where(rho <= PUPIL_FRACTION, pupil_tone, iris), sclera)

    caruncle = _caruncle_landmarks(g, rng)
    cc = caruncle.mean(axis=0)
    blob = ((xs - cc[0]) / 1.6) ** 2 + ((ys - cc[1]) / 1.1) ** 2 <= 1.0
    eye = np.where(blob, sclera_tone * 0.72, eye)
    img = np.where(visible, eye, img)

    # light: global gain times a gentle directional gradient
    phi = rng.uniform(0, 2 * np.pi)
    ramp = ((xs - WIDTH / 2) * math.cos(phi) + (ys - HEIGHT / 2) * math.sin(phi)) / (WIDTH / 2)
    img = img * p.light_intensity * (1.0 + 0.12 * ramp)
    img = img.reshape(HEIGHT, WIDTH, s * s).mean(axis=2)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    return SynthSample(
        image=image,
        iris_landmarks=_iris_landmarks(g),
        interior_landmarks=_contour_landmarks(g),
        caruncle_landmarks=caruncle,
        gaze=tuple(p.gaze),
        params=p,
    )


def _check_params(p: EyeSceneParams) -> None:
    problems = []
    if not abs(p.gaze[0]) <= GAZE_PITCH_LIMIT + 1e-12:
        problems.append(f"gaze pitch {p.gaze[0]}")
    if not abs(p.gaze[1]) <= GAZE_YAW_LIMIT + 1e-12:
        problems.append(f"gaze yaw {p.gaze[1]}")
    if not abs(p.head_pose[0]) <= HEAD_PITCH_LIMIT + 1e-12:
        problems.append(f"head pitch {p.head_pose[0]}")
    if not abs(p.head_pose[1]) <= HEAD_YAW_LIMIT + 1e-12:
        problems.append(f"head yaw {p.head_pose[1]}")
    if not LIGHT_LIMITS[0] - 1e-12 <= p.light_intensity <= LIGHT_LIMITS[1] + 1e-12:
        problems.append(f"light intensity {p.light_intensity}")
    if not p.iris_radius_px > 0:
        problems.append(f"iris radius {p.iris_radius_px}")
    if not 0.0 < p.aperture <= 1.0:
        problems.append(f"aperture {p.aperture}")
    if problems:
        raise RenderError("scene parameters out of range: " + ", ".join(problems))


def _mirror_sample(s: SynthSample, params: EyeSceneParams) -> SynthSample:
    flip = lambda pts: np.column_stack([WIDTH - pts[:, 0], pts[:, 1]])  # noqa: E731
    # keep "counterclockwise from the rightmost point" after reflection
    iris = flip(s.iris_landmarks)[(16 - np.arange(32)) % 32]
    return SynthSample(
        image=s.image[:, ::-1].copy(),
        iris_landmarks=iris,
        interior_landmarks=flip(s.interior_landmarks),
        caruncle_landmarks=flip(s.caruncle_landmarks),
        gaze=tuple(params.gaze),
        params=params,
    )


def render_eye(params: EyeSceneParams) -> SynthSample:
    """Render one 36x60 grayscale eye with analytic landmarks.

    Right eyes are drawn with the inner corner on the right; a left eye is the
    mirror image of the right eye with the mirrored parameters.
    """
    _check_params(params)
    if params.left_eye:
        sample = _mirror_sample(_render_canonical(params.mirrored()), params)
    else:
        sample = _render_canonical(params)
    for name in ("iris_landmarks", "interior_landmarks", "caruncle_landmarks"):
        pts = getattr(sample, name)
        inside = (pts[:, 0] >= 0) & (pts[:, 0] < WIDTH) & (pts[:, 1] >= 0) & (pts[:, 1] < HEIGHT)
        if not inside.all():
            raise RenderError(f"{name} leave the image frame for params {params}")
    return sample


# ---------------------------------------------------------------- datasets


@dataclass
class DatasetManifest:
    entries: list[dict]
    seed: int
    version: str = GENERATOR_VERSION
    counts: dict = field(default_factory=dict)
    ranges: dict = field(default_factory=dict)
    root: Path | None = None

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "counts": self.counts,
            "splits": {
                split: [e["id"] for e in self.entries if e["split"] == split]
                for split in sorted(self.counts)
                if split != "total"
            },
            "ranges": self.ranges,
            "entries": self.entries,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            d = json.loads(path.read_text())
        except OSError as exc:
            raise DataIOError(f"cannot read manifest {path}: {exc}") from exc
        m = cls(
            entries=d["entries"],
            seed=d.get("seed", 0),
            version=d.get("version", "external"),
            counts=d.get("counts", {}),
            ranges=d.get("ranges", {}),
            root=path.parent,
        )
        return m

    def split(self, name: str) -> list[dict]:
        return [e for e in self.entries if e["split"] == name]

    def validate(self) -> None:
        root = self.root or Path(".")
        for e in self.entries:
            for key in ("image", "label"):
                if not (root / e[key]).exists():
                    raise DataIOError(f"manifest references missing file {root / e[key]}")
        if self.counts.get("total", len(self.entries)) != len(self.entries):
            raise DataIOError(
                f"manifest declares {self.counts['total']} entries but lists {len(self.entries)}"
            )


def _write_sample(sample: SynthSample, out_dir: Path, sample_id: str, write_masks: bool) -> list[Path]:
    img_path = out_dir / f"{sample_id}.png"
    label_path = out_dir / f"{sample_id}.json"
    Image.fromarray(sample.image, mode="L").save(img_path)
    label_path.write_text(json.dumps(sample.label_dict(), sort_keys=True))
    written = [img_path, label_path]
    if write_masks:
        written.extend(maskgen.save_mask_pair(sample.mask_pair(), out_dir, sample_id))
    return written


def generate_dataset(
    n: int,
    ranges: SceneRanges = SceneRanges(),
    seed: int = 0,
    out_dir=".",
    n_subjects: int = 20,
    val_fraction: float = 0.25,
    write_masks: bool = True,
) -> DatasetManifest:
    """Render ``n`` samples into ``out_dir`` with a manifest.

    Sample ``i`` is drawn from a generator seeded with ``(seed, i)``, so any
    sample can be regenerated alone. Pseudo-subjects are assigned round-robin;
    a seeded permutation sends ``floor(n * val_fraction)`` samples to the
    validation split.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    if n_subjects < 1:
        raise ConfigError("n_subjects must be >= 1")
    ranges.validate()
    out_dir = Path(out_dir)
    created_dir = not out_dir.exists()
    written: list[Path] = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        n_val = int(math.floor(n * val_fraction + 1e-9))
        val_ids = set(np.random.default_rng([seed, 2**31]).permutation(n)[:n_val].tolist())
        entries = []
        for i in range(n):
            rng = np.random.default_rng([seed, i])
            for _attempt in range(20):
                params = sample_scene(rng, ranges)
                try:
                    sample = render_eye(params)
                    break
                except RenderError as exc:
                    log.debug("resampling scene %d: %s", i, exc)
            else:
                raise RenderError(f"could not render sample {i} within 20 attempts")
            sid = f"{i:06d}"
            written.extend(_write_sample(sample, out_dir, sid, write_masks))
            entry = {
                "id": sid,
                "subject": f"s{i % n_subjects:02d}",
                "split": "val" if i in val_ids else "train",
                "image": f"{sid}.png",
                "label": f"{sid}.json",
            }
            if write_masks:
                entry["iris_mask"] = f"{sid}_iris.png"
                entry["vis_mask"] = f"{sid}_vis.png"
            entries.append(entry)
        counts = {
            "total": n,
            "train": sum(e["split"] == "train" for e in entries),
            "val": sum(e["split"] == "val" for e in entries),
        }
        manifest = DatasetManifest(entries, seed, GENERATOR_VERSION, counts, ranges.to_dict(), out_dir)
        manifest.save(out_dir / "manifest.json")
        written.append(out_dir / "manifest.json")
        return manifest
    except OSError as exc:
        for path in written:
            path.unlink(missing_ok=True)
        if created_dir:
            shutil.rmtree(out_dir, ignore_errors=True)
        raise DataIOError(f"dataset generation failed in {out_dir}: {exc}") from exc
