"""Per-cell training labels from a camera-view ground-truth image.

A cell is drivable when both its nearest and its furthest point project onto
positive pixels of the ground-truth image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ProjectionError, ShapeError
from .spherical import CH_X, CH_Z, N_CHANNELS, N_FEATURES, NEAR_RHO


@dataclass(frozen=True)
class CameraProjection:
    K: np.ndarray  # (3, 4) LiDAR frame -> homogeneous pixel coordinates

    def __post_init__(self):
        k = np.asarray(self.K, dtype=np.float64)
        if k.shape != (3, 4):
            raise ShapeError(f"projection matrix must be 3x4, got {k.shape}")
        if not np.isfinite(k).all():
            raise ShapeError("projection matrix has non-finite entries")
        object.__setattr__(self, "K", k)

    @classmethod
    def identity(cls) -> "CameraProjection":
        return cls(np.hstack([np.eye(3), np.zeros((3, 1))]))


def project_to_camera(p, cam: CameraProjection) -> tuple[float, float]:
    """Pixel coordinates ``(u, v)`` of one point; raises if it is not in front of the camera."""
    xh, yh, zh = cam.K @ np.array([p[0], p[1], p[2], 1.0], dtype=np.float64)
    if zh == 0:
        raise ProjectionError("point lies on the camera's focal plane (zero depth)")
    if zh < 0:
        raise ProjectionError("point is behind the camera")
    return float(xh / zh), float(yh / zh)


def project_points(xyz: np.ndarray, cam: CameraProjection) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection: ``(u, v, valid)`` with ``valid`` false for depth <= 0."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    h = np.column_stack([xyz, np.ones(len(xyz))]) @ cam.K.T
    valid = h[:, 2] > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(valid, h[:, 0] / h[:, 2], np.nan)
        v = np.where(valid, h[:, 1] / h[:, 2], np.nan)
    return u, v, valid


def _positive_at(gt: np.ndarray, u: np.ndarray, v: np.ndarray, valid: np.ndarray) -> np.ndarray:
    height, width = gt.shape
    out = np.zeros(u.shape, dtype=bool)
    with np.errstate(invalid="ignore"):
        col = np.floor(u + 0.5)
        row = np.floor(v + 0.5)
        ok = valid & (col >= 0) & (col < width) & (row >= 0) & (row < height)
    out[ok] = gt[row[ok].astype(np.intp), col[ok].astype(np.intp)] > 0
    return out


def label_cells(tensor: np.ndarray, gt: np.ndarray, cam: CameraProjection) -> np.ndarray:
    """``(rows, cols)`` 0/1 uint8 labels; empty cells and unprojectable points give 0."""
    if tensor.ndim != 3 or tensor.shape[2] != N_CHANNELS:
        raise ShapeError(f"expected a (rows, cols, {N_CHANNELS}) tensor, got {tensor.shape}")
    gt = np.asarray(gt)
    if gt.ndim != 2 or gt.size == 0:
        raise ShapeError(f"ground-truth image must be a non-empty 2-D array, got {gt.shape}")
    rows, cols = tensor.shape[:2]
    flat = tensor.reshape(-1, N_CHANNELS).astype(np.float64)
    occupied = flat[:, NEAR_RHO] > 0
    hit = occupied.copy()
    for base in (0, N_FEATURES):
        u, v, valid = project_points(flat[:, base + CH_X:base + CH_Z + 1], cam)
        hit &= _positive_at(gt, u, v, valid)
    return hit.reshape(rows, cols).astype(np.uint8)
