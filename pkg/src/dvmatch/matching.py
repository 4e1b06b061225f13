"""Soft/hard correspondences from features, smoothness loss, and total-loss assembly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PointCloud, chamfer, knn
from .deformation import DeformationGraph, TransformSet, arap_energy, deformation_loss
from .geodesics import GeodesicMatrix, geodesic_similarity_loss

__all__ = [
    "DEFAULT_TOP_N",
    "DEFAULT_TEMPERATURE",
    "SoftCorrespondence",
    "LossWeights",
    "soft_correspondence",
    "pull_back",
    "smoothness_loss",
    "hard_match",
    "total_loss",
]

DEFAULT_TOP_N = 10
DEFAULT_TEMPERATURE = 0.07

_ROW_CHUNK = 256


@dataclass(frozen=True)
class SoftCorrespondence:
    """Row-stochastic sparse matching: per source row, at most top_n weighted targets.

    Rows are stored rectangularly; entries beyond counts[i] are zero-weight padding.
    """

    rows: int
    cols: int
    idx: np.ndarray  # (rows, width) target indices, ascending per valid span
    weight: np.ndarray  # (rows, width) nonnegative, each row sums to 1
    counts: np.ndarray  # (rows,) valid entries per row

    def __post_init__(self):
        idx = np.asarray(self.idx, dtype=np.int64)
        w = np.asarray(self.weight, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.int64)
        if idx.shape != w.shape or idx.shape[0] != self.rows or counts.shape != (self.rows,):
            raise ValueError("inconsistent correspondence arrays")
        if idx.size and (idx.min() < 0 or idx.max() >= self.cols):
            raise ValueError("target index out of range")
        if (w < 0).any():
            raise ValueError("weights must be nonnegative")
        if np.abs(w.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValueError("rows must sum to 1")
        for name, arr in (("idx", idx), ("weight", w), ("counts", counts)):
            arr.flags.writeable = False
            object.__setattr__(self, name if name != "weight" else "weight", arr)

    def row(self, i: int):
        c = self.counts[i]
        return self.idx[i, :c], self.weight[i, :c]


@dataclass(frozen=True)
class LossWeights:
    deform: float = 0.05
    arap: float = 0.005
    smooth: float = 0.5
    geo: float = 0.02

    def __post_init__(self):
        for name in ("deform", "arap", "smooth", "geo"):
            if getattr(self, name) < 0:
                raise ValueError(f"lambda_{name} must be nonnegative")


def soft_correspondence(feat_src: np.ndarray, feat_tgt: np.ndarray,
                        top_n: int = DEFAULT_TOP_N,
                        temperature: float = DEFAULT_TEMPERATURE) -> SoftCorrespondence:
    """Row softmax of -||f_s - f_t||^2 / temperature, truncated to the top_n weights.

    Kept weights renormalize to sum 1 so every row stays a convex combination.
    Ties in the truncation break to the lower target index.
    """
    fs = np.asarray(feat_src, dtype=np.float64)
    ft = np.asarray(feat_tgt, dtype=np.float64)
    if fs.ndim != 2 or ft.ndim != 2 or fs.shape[1] != ft.shape[1]:
        raise ValueError("feature widths must match")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    n, m = fs.shape[0], ft.shape[0]
    keep = min(top_n, m)
    idx = np.empty((n, keep), dtype=np.int64)
    weight = np.empty((n, keep))
    ft_sq = (ft * ft).sum(axis=1)
    for lo in range(0, n, _ROW_CHUNK):
        block = fs[lo : lo + _ROW_CHUNK]
        d2 = (block * block).sum(axis=1)[:, None] + ft_sq[None, :] - 2.0 * (block @ ft.T)
        np.maximum(d2, 0.0, out=d2)
        scores = -d2 / temperature
        scores -= scores.max(axis=1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=1, keepdims=True)
        # stable argsort of -p: equal weights keep ascending target order
        order = np.argsort(-probs, axis=1, kind="stable")[:, :keep]
        order.sort(axis=1)  # canonical ascending-index storage
        kept = np.take_along_axis(probs, order, axis=1)
        kept /= kept.sum(axis=1, keepdims=True)
        idx[lo : lo + _ROW_CHUNK] = order
        weight[lo : lo + _ROW_CHUNK] = kept
    return SoftCorrespondence(rows=n, cols=m, idx=idx, weight=weight,
                              counts=np.full(n, keep, dtype=np.int64))


def pull_back(pi: SoftCorrespondence, values: np.ndarray) -> np.ndarray:
    """Per source row, the convex combination of target rows: sum_j w_ij V[j]."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
        squeeze = True
    else:
        squeeze = False
    if v.shape[0] != pi.cols:
        raise ValueError(f"value rows {v.shape[0]} do not match correspondence cols {pi.cols}")
    out = np.einsum("nk,nkd->nd", pi.weight, v[pi.idx])
    return out[:, 0] if squeeze else out


def smoothness_loss(pi: SoftCorrespondence, target: PointCloud) -> float:
    """Chamfer between the target and its correspondence-smoothed self-image."""
    if pi.cols != len(target):
        raise ValueError("correspondence cols must match target size")
    return chamfer(target, PointCloud(pull_back(pi, target.points)))


def hard_match(feat_src: np.ndarray, feat_tgt: np.ndarray) -> np.ndarray:
    """Nearest target row per source row (ties to the lowest index)."""
    fs = np.asarray(feat_src, dtype=np.float64)
    ft = np.asarray(feat_tgt, dtype=np.float64)
    if fs.ndim != 2 or ft.ndim != 2 or fs.shape[1] != ft.shape[1]:
        raise ValueError("feature widths must match")
    idx, _ = knn(fs, ft, 1)
    return idx[:, 0]


def total_loss(graph_src: DeformationGraph, transforms: TransformSet,
               source: PointCloud, target: PointCloud, pi: SoftCorrespondence,
               feat_src: np.ndarray, geo_src: GeodesicMatrix | None,
               weights: LossWeights = LossWeights(), mode: str = "full",
               geo_neighbors: int = 10):
    """Weighted directed total loss and its unweighted per-term breakdown.

    The geodesic term evaluates on (feat_src, geo_src) and is skipped (reported
    as 0) when no geodesic matrix is supplied. Partial mode switches the
    deformation term to its one-sided form.
    """
    terms = {
        "deform": deformation_loss(graph_src, transforms, source, target, mode=mode),
        "arap": arap_energy(graph_src, transforms),
        "smooth": smoothness_loss(pi, target),
        "geo": (geodesic_similarity_loss(feat_src, geo_src, k=geo_neighbors)
                if geo_src is not None else 0.0),
    }
    total = (weights.deform * terms["deform"] + weights.arap * terms["arap"]
             + weights.smooth * terms["smooth"] + weights.geo * terms["geo"])
    return float(total), terms
