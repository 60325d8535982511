"""Loading samples into memory and ingesting external eye crops.

Datasets on disk use one layout whether synthetic or external: a directory
with ``manifest.json`` plus ``<id>.png`` (60x36 8-bit grayscale) and
``<id>.json`` (at least a ``gaze`` entry) for every sample.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageOps

from . import maskgen
from .errors import ContractError, DataIOError
from .synth import HEIGHT, WIDTH, DatasetManifest

MASK_SUFFIXES = ("_iris", "_vis")


@dataclass
class EyeArrays:
    ids: list
    subjects: list
    images: np.ndarray  # (N, H, W) uint8
    gaze: np.ndarray | None = None  # (N, 2) radians
    masks: np.ndarray | None = None  # (N, 2, H, W) uint8, channels [iris, visible]
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "EyeArrays":
        idx = np.asarray(idx, dtype=np.int64)
        return EyeArrays(
            ids=[self.ids[i] for i in idx],
            subjects=[self.subjects[i] for i in idx],
            images=self.images[idx],
            gaze=None if self.gaze is None else self.gaze[idx],
            masks=None if self.masks is None else self.masks[idx],
            meta=dict(self.meta),
        )


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
    except OSError as exc:
        raise DataIOError(f"cannot read image {path}: {exc}") from exc
    if arr.shape != (HEIGHT, WIDTH):
        raise ContractError(f"{path}: expected {HEIGHT}x{WIDTH} image, got {arr.shape}")
    return arr


def list_image_ids(directory) -> list[str]:
    directory = Path(directory)
    ids = [
        p.stem for p in sorted(directory.glob("*.png"))
        if not p.stem.endswith(MASK_SUFFIXES)
    ]
    if not ids:
        raise DataIOError(f"no images found in {directory}")
    return ids


def _gt_masks(root: Path, entry: dict, label: dict) -> np.ndarray:
    if "iris_mask" in entry and (root / entry["iris_mask"]).exists():
        pair = maskgen.load_mask_pair(root, entry["id"])
    else:
        pair = maskgen.make_mask_pair(
            label["iris_landmarks"], label["interior_landmarks"], label["caruncle_landmarks"]
        )
    return pair.stack()


def load_dataset(source, split: str | None = None, with_masks: bool = False,
                 mask_dir=None) -> EyeArrays:
    """Load a dataset directory (or manifest) into arrays.

    ``with_masks`` loads ground-truth masks (synthetic data only);
    ``mask_dir`` instead loads exported masks named ``<id>_iris.png`` and
    ``<id>_vis.png``.
    """
    manifest = source if isinstance(source, DatasetManifest) else DatasetManifest.load(source)
    root = manifest.root or Path(".")
    entries = manifest.entries if split is None else manifest.split(split)
    ids, subjects, images, gaze, masks = [], [], [], [], []
    for e in entries:
        ids.append(e["id"])
        subjects.append(e.get("subject", "s00"))
        images.append(load_image(root / e["image"]))
        try:
            label = json.loads((root / e["label"]).read_text())
        except OSError as exc:
            raise DataIOError(f"cannot read label {root / e['label']}: {exc}") from exc
        gaze.append(label["gaze"])
        if mask_dir is not None:
            masks.append(maskgen.load_mask_pair(mask_dir, e["id"]).stack())
        elif with_masks:
            masks.append(_gt_masks(root, e, label))
    shape = (0, HEIGHT, WIDTH)
    return EyeArrays(
        ids=ids,
        subjects=subjects,
        images=np.stack(images) if images else np.zeros(shape, np.uint8),
        gaze=np.asarray(gaze, dtype=np.float64).reshape(-1, 2),
        masks=np.stack(masks).astype(np.uint8) if masks else None,
        meta={"root": str(root), "split": split},
    )


def load_image_dir(directory) -> EyeArrays:
    """Images from a bare directory; labels are read when ``<id>.json`` exists."""
    directory = Path(directory)
    ids = list_image_ids(directory)
    images = np.stack([load_image(directory / f"{i}.png") for i in ids])
    gaze = []
    for i in ids:
        label = directory / f"{i}.json"
        gaze.append(json.loads(label.read_text())["gaze"] if label.exists() else None)
    has_labels = all(g is not None for g in gaze)
    return EyeArrays(
        ids=ids,
        subjects=["s00"] * len(ids),
        images=images,
        gaze=np.asarray(gaze, dtype=np.float64) if has_labels else None,
    )


def normalize_external(image) -> np.ndarray:
    """Convert an already gaze-normalized eye crop to the repo format.

    Grayscale, resized to 60x36 and histogram-equalized. Camera-geometry
    normalization must have been applied beforehand.
    """
    im = image if isinstance(image, Image.Image) else Image.fromarray(np.asarray(image).astype(np.uint8))
    im = im.convert("L")
    if im.size != (WIDTH, HEIGHT):
        im = im.resize((WIDTH, HEIGHT), Image.BILINEAR)
    return np.asarray(ImageOps.equalize(im), dtype=np.uint8)


def ingest_external(samples, out_dir, source: str = "external-normalized") -> DatasetManifest:
    """Write ``(id, subject, image, (pitch, yaw))`` tuples in the repo layout."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for sid, subject, image, gaze in samples:
        sid = str(sid)
        Image.fromarray(normalize_external(image), mode="L").save(out_dir / f"{sid}.png")
        (out_dir / f"{sid}.json").write_text(json.dumps({"gaze": [float(gaze[0]), float(gaze[1])]}))
        entries.append({"id": sid, "subject": str(subject), "split": "all",
                        "image": f"{sid}.png", "label": f"{sid}.json"})
    manifest = DatasetManifest(entries, seed=0, version=source,
                               counts={"total": len(entries), "all": len(entries)}, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest
