"""Correspondence quality metrics: Euclidean error, tolerance accuracy, geodesic error."""

from __future__ import annotations

import numpy as np

from .core import PointCloud
from .geodesics import GeodesicMatrix

__all__ = ["euclidean_error", "accuracy", "geodesic_error"]


def _as_index(arr, n, what):
    a = np.asarray(arr, dtype=np.int64).reshape(-1)
    if a.size and (a.min() < 0 or a.max() >= n):
        raise ValueError(f"{what} contains out-of-range indices")
    return a


def euclidean_error(dense_map, ground_truth, target: PointCloud) -> float:
    """Mean Euclidean distance between mapped and true target points."""
    m = _as_index(dense_map, len(target), "map")
    gt = _as_index(ground_truth, len(target), "ground truth")
    if m.size != gt.size:
        raise ValueError("map and ground truth sizes differ")
    return float(np.linalg.norm(target.points[m] - target.points[gt], axis=1).mean())


def accuracy(dense_map, ground_truth, target: PointCloud, tolerance: float) -> float:
    """Fraction of correspondences within tolerance * (target diameter) of truth.

    Strict inequality, so tolerance 0 always scores 0.
    """
    if not 0.0 <= tolerance <= 1.0:
        raise ValueError("tolerance must lie in [0, 1]")
    m = _as_index(dense_map, len(target), "map")
    gt = _as_index(ground_truth, len(target), "ground truth")
    if m.size != gt.size:
        raise ValueError("map and ground truth sizes differ")
    d = target.diameter()
    err = np.linalg.norm(target.points[m] - target.points[gt], axis=1)
    return float((err < tolerance * d).mean())


def geodesic_error(dense_map, ground_truth, geo_target: GeodesicMatrix,
                   area_scale: float | None = None,
                   target: PointCloud | None = None) -> float:
    """Mean geodesic distance between mapped and true targets, divided by area_scale.

    area_scale defaults to the target's bounding-box diagonal when a cloud is
    given (meshless stand-in for a root-area normalization); otherwise it must
    be supplied.
    """
    n = len(geo_target)
    m = _as_index(dense_map, n, "map")
    gt = _as_index(ground_truth, n, "ground truth")
    if m.size != gt.size:
        raise ValueError("map and ground truth sizes differ")
    if area_scale is None:
        if target is None:
            raise ValueError("area_scale or a target cloud is required")
        area_scale = target.bbox_diagonal()
    if area_scale <= 0:
        raise ValueError("area_scale must be positive")
    vals = geo_target.distances[m, gt]
    if not np.isfinite(vals).all():
        raise ValueError("selected geodesic entries are not finite")
    return float(vals.mean() / area_scale)
