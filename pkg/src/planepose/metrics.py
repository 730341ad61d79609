"""Localization and image-similarity metrics between predicted and true planes."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidInputError, ShapeError
from .geom import GRID_HALF_EXTENT, plane_normal

SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _points(p) -> np.ndarray:
    pts = np.asarray(p, dtype=np.float64)
    return pts.reshape(pts.shape[:-1] + (3, 3)) if pts.shape[-1] == 9 else pts


def _image(a) -> np.ndarray:
    return np.asarray(getattr(a, "data", a), dtype=np.float64)


def euclidean_distance(pred, true, normalize: bool = False, half_extent: float = GRID_HALF_EXTENT):
    """Mean distance between corresponding reference points (voxels, or grid units)."""
    d = np.linalg.norm(_points(pred) - _points(true), axis=-1).mean(axis=-1)
    return d / half_extent if normalize else d


def plane_angle(pred, true):
    """Angle in radians between the oriented plane normals, in ``[0, pi]``."""
    n1, n2 = plane_normal(_points(pred)), plane_normal(_points(true))
    # atan2 form is exact (0) for identical normals, unlike arccos of a rounded dot
    cross = np.linalg.norm(np.cross(n1, n2), axis=-1)
    dot = np.clip(np.sum(n1 * n2, axis=-1), -1.0, 1.0)
    return np.arctan2(cross, dot)


def mse_points(pred, true):
    """Mean squared coordinate error in voxel^2."""
    diff = _points(pred) - _points(true)
    return (diff * diff).reshape(diff.shape[:-2] + (9,)).mean(axis=-1)


def ncc(a, b) -> float:
    """Global zero-mean normalized cross-correlation.

    Identical images score exactly 1, including two equal constant images;
    otherwise a constant image scores 0.
    """
    a, b = _image(a), _image(b)
    if a.shape != b.shape:
        raise ShapeError(f"ncc: image shapes {a.shape} and {b.shape} differ")
    if np.array_equal(a, b):
        return 1.0
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    a0 = a - a.mean()
    b0 = b - b.mean()
    saa, sbb = np.sum(a0 * a0), np.sum(b0 * b0)
    return float(np.clip(np.sum(a0 * b0) / np.sqrt(saa * sbb), -1.0, 1.0))


def ssim(a, b, window: int = SSIM_WINDOW, data_range: float = 1.0) -> float:
    """Mean structural similarity over all ``window x window`` patches (stride 1)."""
    a, b = _image(a), _image(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: image shapes {a.shape} and {b.shape} differ")
    if min(a.shape) < window:
        raise InvalidInputError(f"ssim needs images of at least {window}x{window}, got {a.shape}")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def local_mean(x):
        return sliding_window_view(x, (window, window)).mean(axis=(-2, -1))

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov = local_mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
