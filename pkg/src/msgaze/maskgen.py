"""Landmark sets to binary anatomical masks.

Both masks are produced the same way: join the landmarks into a closed
polygon and rasterize it with an even-odd rule sampled at pixel centers.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels
from .errors import ContractError, DataIOError

HEIGHT, WIDTH = 36, 60
# In the 16-point eye contour (outer corner, 7 upper-lid points, inner corner,
# 7 lower-lid points) the inner corner sits at this index; the caruncle
# centroid is spliced in directly after it.
INNER_CORNER_INDEX = 8


@dataclass(frozen=True)
class MaskPair:
    iris: np.ndarray
    visible: np.ndarray
    soft: bool = False

    def __post_init__(self):
        if self.iris.shape != self.visible.shape:
            raise ContractError(f"mask shapes differ: {self.iris.shape} vs {self.visible.shape}")
        if not self.soft:
            for m in (self.iris, self.visible):
                if not np.isin(m, (0, 1)).all():
                    raise ContractError("binary mask holds values other than 0/1")

    def stack(self) -> np.ndarray:
        """(2, H, W) array in channel order [iris, visible]."""
        return np.stack([self.iris, self.visible])


def _as_points(points, name="points") -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ContractError(f"{name} must be an (n, 2) array, got shape {pts.shape}")
    if not np.isfinite(pts).all():
        raise ContractError(f"{name} contains non-finite coordinates")
    return pts


def _is_degenerate(pts: np.ndarray) -> bool:
    if len(pts) < 3:
        return True
    rel = pts - pts[0]
    scale = float(np.abs(rel).max())
    if scale == 0.0:
        return True
    far = rel[np.argmax(np.hypot(rel[:, 0], rel[:, 1]))]
    cross = rel[:, 0] * far[1] - rel[:, 1] * far[0]
    return bool(np.all(np.abs(cross) <= 1e-12 * scale * scale))


def bin_enc(polygon, width: int = WIDTH, height: int = HEIGHT) -> np.ndarray:
    """Rasterize a closed polygon into a {0,1} uint8 grid of shape (height, width).

    A pixel is set when its center ``(x + 0.5, y + 0.5)`` is inside under the
    even-odd rule. Centers lying exactly on an edge count as inside for
    left/top edges and outside for right/bottom ones. Fewer than three
    vertices, or all vertices collinear, give an empty mask.
    """
    pts = _as_points(polygon, "polygon")
    if _is_degenerate(pts):
        return np.zeros((height, width), dtype=np.uint8)
    return kernels.fill_polygon(
        np.ascontiguousarray(pts[:, 0]), np.ascontiguousarray(pts[:, 1]), height, width
    )


def caruncle_centroid(points) -> np.ndarray:
    pts = _as_points(points, "caruncle landmarks")
    if len(pts) != 6:
        raise ContractError(f"expected 6 caruncle landmarks, got {len(pts)}")
    return pts.mean(axis=0)


def visible_polygon(interior, caruncle) -> np.ndarray:
    """The 17-vertex visible-eyeball ring: contour with the caruncle centroid spliced in."""
    contour = _as_points(interior, "interior landmarks")
    if len(contour) != 16:
        raise ContractError(f"expected 16 interior landmarks, got {len(contour)}")
    centroid = caruncle_centroid(caruncle)
    k = INNER_CORNER_INDEX + 1
    return np.vstack([contour[:k], centroid[None], contour[k:]])


def make_mask_pair(iris, interior, caruncle, width: int = WIDTH, height: int = HEIGHT) -> MaskPair:
    iris_pts = _as_points(iris, "iris landmarks")
    if len(iris_pts) != 32:
        raise ContractError(f"expected 32 iris landmarks, got {len(iris_pts)}")
    # the iris polygon is deliberately not clipped by the eyelids
    return MaskPair(
        iris=bin_enc(iris_pts, width, height),
        visible=bin_enc(visible_polygon(interior, caruncle), width, height),
    )


def save_mask_pair(pair: MaskPair, out_dir, sample_id: str) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    paths = (out_dir / f"{sample_id}_iris.png", out_dir / f"{sample_id}_vis.png")
    for path, m in zip(paths, (pair.iris, pair.visible)):
        Image.fromarray((np.asarray(m) > 0).astype(np.uint8) * 255, mode="L").save(path)
    return paths


def load_mask_pair(mask_dir, sample_id: str) -> MaskPair:
    mask_dir = Path(mask_dir)
    try:
        iris = np.asarray(Image.open(mask_dir / f"{sample_id}_iris.png"), dtype=np.uint8)
        vis = np.asarray(Image.open(mask_dir / f"{sample_id}_vis.png"), dtype=np.uint8)
    except OSError as exc:
        raise DataIOError(f"cannot read masks for {sample_id} in {mask_dir}: {exc}") from exc
    return MaskPair(iris=(iris > 127).astype(np.uint8), visible=(vis > 127).astype(np.uint8))
