"""Evaluation math: gaze vectors, angular error, mIoU and image noise variance."""
from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ContractError

# second-difference operator; its response to i.i.d. noise of variance s^2 has variance 36 s^2
NOISE_OPERATOR = np.array([[1, -2, 1], [-2, 4, -2], [1, -2, 1]], dtype=np.float64)


def to_vector(gaze) -> np.ndarray:
    """Map (pitch, yaw) radians to a unit 3-vector; accepts (..., 2) arrays."""
    g = np.asarray(gaze, dtype=np.float64)
    pitch, yaw = g[..., 0], g[..., 1]
    return np.stack(
        [-np.cos(pitch) * np.sin(yaw), -np.sin(pitch), -np.cos(pitch) * np.cos(yaw)], axis=-1
    )


def angular_error(gaze, pred) -> np.ndarray | float:
    """Angle in degrees between the gaze directions of two (pitch, yaw) labels.

    Works elementwise over leading dimensions. Equal to the arccos of the
    normalized dot product, but evaluated as ``atan2(|a x b|, a . b)``: arccos
    loses about 8 significant digits near 0 deg and 180 deg, while this form
    stays accurate and returns exactly 0 for identical labels.
    """
    a, b = to_vector(gaze), to_vector(pred)
    sin = np.linalg.norm(np.cross(a, b), axis=-1)
    cos = np.sum(a * b, axis=-1)
    delta = np.degrees(np.arctan2(sin, cos))
    return float(delta) if np.ndim(delta) == 0 else delta


def angular_error_arccos(gaze, pred):
    """Direct clamped-arccos form; kept for cross-checking."""
    a, b = to_vector(gaze), to_vector(pred)
    cos = np.sum(a * b, axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    delta = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    return float(delta) if np.ndim(delta) == 0 else delta


def _check_binary(m, name):
    m = np.asarray(m)
    if not np.isin(m, (0, 1)).all():
        raise ContractError(f"{name} is not binary")
    return m.astype(bool)


def iou(pred, gt) -> float:
    p, g = _check_binary(pred, "prediction"), _check_binary(gt, "ground truth")
    if p.shape != g.shape:
        raise ContractError(f"shape mismatch {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def miou(pred, gt) -> float:
    """Mean IoU over regions, then over samples.

    ``pred`` and ``gt`` are (N, R, H, W) or (R, H, W) binary arrays. A region
    that is empty in both counts as IoU 1.
    """
    p, g = np.asarray(pred), np.asarray(gt)
    if p.shape != g.shape:
        raise ContractError(f"shape mismatch {p.shape} vs {g.shape}")
    if p.ndim == 3:
        p, g = p[None], g[None]
    if p.ndim != 4:
        raise ContractError(f"expected (N, R, H, W) masks, got {p.shape}")
    pb, gb = _check_binary(p, "prediction"), _check_binary(g, "ground truth")
    inter = np.logical_and(pb, gb).sum(axis=(2, 3))
    union = np.logical_or(pb, gb).sum(axis=(2, 3))
    per_region = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    return float(per_region.mean(axis=1).mean())


def estimate_noise_variance(image) -> float:
    """Noise variance from the mean squared response of the 3x3 operator.

    Only positions where the operator fits entirely inside the image are
    used, giving (W-2)(H-2) terms.
    """
    im = np.ascontiguousarray(image, dtype=np.float64)
    if im.ndim != 2 or im.shape[0] < 3 or im.shape[1] < 3:
        raise ContractError(f"noise estimation needs a 2-D image of at least 3x3, got {im.shape}")
    h, w = im.shape
    return kernels.noise_response_sumsq(im) / (36.0 * (w - 2) * (h - 2))
