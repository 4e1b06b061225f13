"""Point-cloud containers, sampling, nearest-neighbor search and chamfer distances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "PointCloud",
    "NormalizationRecord",
    "SelectionMatrix",
    "normalize_cloud",
    "farthest_point_sample",
    "knn",
    "chamfer",
    "one_sided_chamfer",
]

# Query rows per chunk for brute-force distance sweeps; bounds peak memory.
_CHUNK = 256


@dataclass(frozen=True)
class PointCloud:
    """Immutable ordered set of 3D points. Index i is stable across all operations."""

    points: np.ndarray  # (N, 3) float64, read-only

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    def bbox(self):
        """(min, max) corners of the axis-aligned bounding box."""
        return self.points.min(axis=0), self.points.max(axis=0)

    def bbox_diagonal(self):
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))

    def diameter(self):
        """Maximal pairwise Euclidean distance."""
        pts = self.points
        best = 0.0
        for lo in range(0, len(self), _CHUNK):
            d2 = _sqdist_block(pts[lo : lo + _CHUNK], pts)
            best = max(best, float(d2.max()))
        return float(np.sqrt(best))


@dataclass(frozen=True)
class NormalizationRecord:
    """Center/scale pair mapping an original cloud to its normalized twin."""

    center: np.ndarray  # (3,)
    scale: float
    degenerate: bool = False

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        c.flags.writeable = False
        object.__setattr__(self, "center", c)
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def apply(self, cloud: PointCloud) -> PointCloud:
        return PointCloud((cloud.points - self.center) / self.scale)

    def invert(self, cloud: PointCloud) -> PointCloud:
        return PointCloud(cloud.points * self.scale + self.center)


@dataclass(frozen=True)
class SelectionMatrix:
    """Row-per-pick binary selector: row i has its single 1 at column selected[i]."""

    source_size: int
    selected: np.ndarray  # (m,) distinct indices into [0, source_size)

    def __post_init__(self):
        sel = np.asarray(self.selected, dtype=np.int64).reshape(-1)
        if sel.size < 1:
            raise ValueError("selection must pick at least one index")
        if sel.min() < 0 or sel.max() >= self.source_size:
            raise ValueError("selected index out of range")
        if np.unique(sel).size != sel.size:
            raise ValueError("selected indices must be distinct")
        sel.flags.writeable = False
        object.__setattr__(self, "selected", sel)

    def __len__(self):
        return self.selected.size

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Gather the selected rows (the Pi @ S product, without forming Pi)."""
        return np.asarray(points)[self.selected]

    def as_dense(self) -> np.ndarray:
        mat = np.zeros((len(self), self.source_size))
        mat[np.arange(len(self)), self.selected] = 1.0
        return mat


def normalize_cloud(cloud: PointCloud):
    """Center at the centroid and scale the longest bounding-box edge to 1.

    Returns the normalized cloud and a NormalizationRecord that inverts it exactly.
    Zero-extent clouds keep scale 1 and set the record's degenerate flag.
    """
    pts = cloud.points
    center = pts.mean(axis=0)
    extent = pts.max(axis=0) - pts.min(axis=0)
    scale = float(extent.max())
    degenerate = scale == 0.0
    if degenerate:
        scale = 1.0
    rec = NormalizationRecord(center=center, scale=scale, degenerate=degenerate)
    return rec.apply(cloud), rec


def farthest_point_sample(cloud: PointCloud, m: int, seed: int = 0) -> SelectionMatrix:
    """Greedy farthest point sampling starting from index `seed`.

    selected[k] maximizes the minimum distance to the already-selected set;
    ties break to the lowest index, so the result is deterministic.
    """
    pts = cloud.points
    n = len(cloud)
    if not 1 <= m <= n:
        raise ValueError(f"sample count m={m} must satisfy 1 <= m <= N={n}")
    if not 0 <= seed < n:
        raise ValueError(f"seed index {seed} out of range [0, {n})")
    selected = np.empty(m, dtype=np.int64)
    selected[0] = seed
    min_d2 = np.sum((pts - pts[seed]) ** 2, axis=1)
    for k in range(1, m):
        nxt = int(np.argmax(min_d2))  # argmax returns the first max -> lowest index
        selected[k] = nxt
        np.minimum(min_d2, np.sum((pts - pts[nxt]) ** 2, axis=1), out=min_d2)
    return SelectionMatrix(source_size=n, selected=selected)


def _rows(obj) -> np.ndarray:
    if isinstance(obj, PointCloud):
        return obj.points
    arr = np.asarray(obj, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected 2D row matrix, got shape {arr.shape}")
    return arr


def _sqdist_block(q: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances between row blocks.

    Difference-based for small dimension (keeps exact ties exact), Gram-trick
    otherwise; both are deterministic.
    """
    if q.shape[1] <= 8:
        diff = q[:, None, :] - r[None, :, :]
        return np.einsum("qrd,qrd->qr", diff, diff)
    d2 = (q * q).sum(axis=1)[:, None] + (r * r).sum(axis=1)[None, :] - 2.0 * (q @ r.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def knn(query, reference, k: int):
    """k nearest reference rows per query row, ascending distance, ties to lowest index.

    Accepts PointClouds or plain (N, D) arrays. Returns (indices, distances),
    both (Q, k).
    """
    q = _rows(query)
    r = _rows(reference)
    if q.shape[1] != r.shape[1]:
        raise ValueError(f"dimension mismatch: query {q.shape[1]} vs reference {r.shape[1]}")
    if k <= 0:
        raise ValueError("k must be positive")
    if k > r.shape[0]:
        raise ValueError(f"k={k} exceeds reference size {r.shape[0]}")
    idx = np.empty((q.shape[0], k), dtype=np.int64)
    dist = np.empty((q.shape[0], k), dtype=np.float64)
    for lo in range(0, q.shape[0], _CHUNK):
        d2 = _sqdist_block(q[lo : lo + _CHUNK], r)
        # stable sort keeps equal distances in index order
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        idx[lo : lo + _CHUNK] = order
        dist[lo : lo + _CHUNK] = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return idx, dist


def _min_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-row of `a`: squared distance to the nearest row of `b`."""
    out = np.empty(a.shape[0])
    for lo in range(0, a.shape[0], _CHUNK):
        out[lo : lo + _CHUNK] = _sqdist_block(a[lo : lo + _CHUNK], b).min(axis=1)
    return out


def chamfer(a: PointCloud, b: PointCloud) -> float:
    """Symmetric chamfer distance: mean squared nearest-neighbor distance, both ways."""
    pa, pb = a.points, b.points
    return float(_min_sqdist(pa, pb).mean() + _min_sqdist(pb, pa).mean())


def one_sided_chamfer(a: PointCloud, b: PointCloud) -> float:
    """Mean squared distance from each point of `a` to its nearest point of `b`."""
    return float(_min_sqdist(a.points, b.points).mean())
