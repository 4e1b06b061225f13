"""Heat-method geodesic distances on point clouds and the geodesic-similarity loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .core import PointCloud, knn

__all__ = [
    "GeodesicError",
    "PointCloudLaplacian",
    "GeodesicMatrix",
    "build_laplacian",
    "heat_geodesics",
    "heat_geodesic_matrix",
    "geodesic_similarity_loss",
]

_SOLVE_BATCH = 64


class GeodesicError(RuntimeError):
    pass


@dataclass(frozen=True)
class PointCloudLaplacian:
    """Gaussian-weighted symmetric kNN graph Laplacian with lumped unit-trace mass."""

    stiffness: sp.csr_matrix  # L = D - W, symmetric PSD, zero row sums
    mass: np.ndarray  # (N,) diagonal entries, > 0, summing to 1
    mean_edge: float  # mean kNN distance h
    k: int
    neighbor_idx: np.ndarray  # (N, k) kNN indices (self excluded)
    neighbor_dist: np.ndarray  # (N, k)
    sigma: float
    component_labels: np.ndarray  # (N,)
    n_components: int

    def __len__(self):
        return self.mass.shape[0]


@dataclass(frozen=True)
class GeodesicMatrix:
    """Symmetrized all-pairs approximate geodesic distances."""

    distances: np.ndarray  # (N, N), nonnegative, zero diagonal, symmetric

    def __post_init__(self):
        d = np.asarray(self.distances, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ValueError("geodesic matrix must be square")
        if not np.isfinite(d).all():
            raise ValueError("geodesic matrix contains non-finite entries")
        if (np.abs(np.diag(d)) > 0).any():
            raise ValueError("geodesic matrix diagonal must be zero")
        if not np.array_equal(d, d.T):
            raise ValueError("geodesic matrix must be exactly symmetric")
        object.__setattr__(self, "distances", d)

    def __len__(self):
        return self.distances.shape[0]


def build_laplacian(cloud: PointCloud, k: int = 8) -> PointCloudLaplacian:
    """Symmetric kNN graph with Gaussian weights exp(-d^2/sigma^2), sigma = mean kNN distance.

    Returns L = D - W, the unit-trace lumped mass, and the neighborhood arrays the
    heat solver reuses. A disconnected graph is reported through component_labels,
    not raised here.
    """
    n = len(cloud)
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points, got {n}")
    idx_all, dist_all = knn(cloud, cloud, k + 1)
    # first column is the point itself (distance 0, lowest-index tie rule)
    nbr = idx_all[:, 1:]
    nbr_d = dist_all[:, 1:]
    sigma = float(nbr_d.mean())
    h = sigma
    if sigma == 0.0:
        raise ValueError("degenerate cloud: all kNN distances are zero")
    rows = np.repeat(np.arange(n), k)
    cols = nbr.reshape(-1)
    vals = np.exp(-(nbr_d.reshape(-1) ** 2) / sigma**2)
    w_dir = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    # union-symmetrize: keep an edge if either endpoint listed the other
    w_sym = w_dir.maximum(w_dir.T)
    degrees = np.asarray(w_sym.sum(axis=1)).reshape(-1)
    lap = sp.diags(degrees) - w_sym
    mass = degrees / degrees.sum()
    n_comp, labels = connected_components(w_sym, directed=False)
    return PointCloudLaplacian(
        stiffness=lap.tocsr(),
        mass=mass,
        mean_edge=h,
        k=k,
        neighbor_idx=nbr,
        neighbor_dist=nbr_d,
        sigma=sigma,
        component_labels=labels,
        n_components=n_comp,
    )


def _gradient_operator(lap: PointCloudLaplacian, cloud: PointCloud) -> np.ndarray:
    """Per-point weighted least-squares gradient stencils over kNN neighborhoods.

    Returns (N, 3, k) such that grad_i = A_i @ (u[nbr_i] - u_i). The pseudo-inverse
    keeps the gradient in the span of the neighborhood (tangent plane on surfaces).
    """
    pts = cloud.points
    d = pts[lap.neighbor_idx] - pts[:, None, :]  # (N, k, 3)
    w = np.exp(-(lap.neighbor_dist**2) / lap.sigma**2)  # (N, k)
    wd = w[:, :, None] * d
    gram = np.einsum("nki,nkj->nij", wd, d)  # (N, 3, 3)
    # the cutoff drops the near-null surface-normal direction (curvature noise
    # otherwise swamps the tangential gradient) while keeping genuinely 3D
    # neighborhoods intact
    pinv = np.linalg.pinv(gram, rcond=1e-2)
    return np.einsum("nij,nkj->nik", pinv, wd)


def _edge_arrays(lap: PointCloudLaplacian, cloud: PointCloud):
    """COO arrays of the symmetrized graph (both edge directions) for divergence sums."""
    coo = sp.triu(lap.stiffness, k=1).tocoo()
    r = np.concatenate([coo.row, coo.col])
    c = np.concatenate([coo.col, coo.row])
    w = np.concatenate([-coo.data, -coo.data])  # off-diagonal of L is -w_ij
    dvec = cloud.points[r] - cloud.points[c]
    sel_r = sp.coo_matrix((np.ones(r.size), (np.arange(r.size), r)),
                          shape=(r.size, len(lap))).tocsr()
    sel_c = sp.coo_matrix((np.ones(c.size), (np.arange(c.size), c)),
                          shape=(c.size, len(lap))).tocsr()
    return r, w, dvec, sel_r, sel_c


def heat_geodesics(lap: PointCloudLaplacian, cloud: PointCloud, sources=None,
                   time_multiplier: float = 1.0) -> np.ndarray:
    """Approximate geodesic distances from each source via the heat method.

    Diffuse a unit of heat for an effective time of time_multiplier * h^2,
    normalize the negated heat gradient, and solve a graph Poisson problem for
    the distance potential (shifted to zero at the source, negatives clamped).

    Returns an (S, N) array of rows; `sources=None` means every point.
    """
    n = len(lap)
    if len(cloud) != n:
        raise ValueError("cloud size does not match laplacian")
    if lap.n_components > 1:
        sizes = np.bincount(lap.component_labels)
        raise GeodesicError(
            f"graph has {lap.n_components} connected components "
            f"(sizes {sizes.tolist()}); geodesics are defined per component"
        )
    if sources is None:
        sources = np.arange(n)
    else:
        sources = np.asarray(sources, dtype=np.int64).reshape(-1)
        if sources.size and (sources.min() < 0 or sources.max() >= n):
            raise ValueError("source index out of range")

    # dimensionless diffusion time calibrated so the continuum bandwidth is
    # time_multiplier * h^2: tau * (second moment / mass) == target time
    r, w_e, dvec, sel_r, sel_c = _edge_arrays(lap, cloud)
    s_i = np.bincount(r, weights=w_e * (dvec**2).sum(axis=1), minlength=n)
    tau = 4.0 * time_multiplier * lap.mean_edge**2 * lap.mass.mean() / s_i.mean()

    heat_op = (sp.diags(lap.mass) + tau * lap.stiffness).tocsc()
    try:
        heat_solve = splu(heat_op)
        poisson = lap.stiffness + 1e-9 * (lap.stiffness.diagonal().mean()) * sp.eye(n)
        poisson_solve = splu(poisson.tocsc())
    except RuntimeError as exc:
        raise GeodesicError(f"sparse factorization failed (system likely indefinite): {exc}")

    grad_op = _gradient_operator(lap, cloud)  # (N, 3, k)
    nbr = lap.neighbor_idx

    out = np.empty((sources.size, n))
    for lo in range(0, sources.size, _SOLVE_BATCH):
        batch = sources[lo : lo + _SOLVE_BATCH]
        rhs = np.zeros((n, batch.size))
        rhs[batch, np.arange(batch.size)] = 1.0
        u = heat_solve.solve(rhs)  # (N, B)
        if not np.isfinite(u).all():
            raise GeodesicError("heat solve produced non-finite values "
                                "(system numerically indefinite)")
        # u is strictly positive (inverse M-matrix); its log shares the same
        # normalized gradient direction but varies polynomially instead of
        # exponentially, which keeps the least-squares fit stable on
        # irregular neighborhoods
        logu = np.log(np.maximum(u, np.finfo(np.float64).tiny))
        du = logu[nbr] - logu[:, None, :]  # (N, k, B)
        grad = np.einsum("nik,nkb->nib", grad_op, du)  # (N, 3, B)
        norm = np.linalg.norm(grad, axis=1, keepdims=True)
        np.divide(grad, norm, out=grad, where=norm > 0)
        flow = -grad
        # the distance minimum at the source has no defined direction; its raw
        # gradient is normalized noise, so drop it from the edge averages
        flow[batch, :, np.arange(batch.size)] = 0.0
        norm[batch, 0, np.arange(batch.size)] = 0.0
        # divergence compatible with L: div_k = sum_j w_kj * avg(flow) . (p_k - p_j);
        # the average counts only endpoints with a defined (nonzero) flow, so the
        # degenerate source vertex does not halve the slope of its incident edges
        defined = (norm[:, 0, :] > 0).astype(np.float64)  # (N, B)
        flow_sum = (sel_r @ flow.reshape(n, -1) + sel_c @ flow.reshape(n, -1))
        flow_sum = flow_sum.reshape(-1, 3, batch.size)
        counts = (sel_r @ defined) + (sel_c @ defined)  # (E, B)
        mean_flow = flow_sum / np.maximum(counts, 1.0)[:, None, :]
        div_edge = np.einsum("eib,ei->eb", mean_flow, dvec) * w_e[:, None]
        div = np.zeros((n, batch.size))
        np.add.at(div, r, div_edge)
        phi = poisson_solve.solve(div)
        phi -= phi[batch, np.arange(batch.size)]
        np.maximum(phi, 0.0, out=phi)
        out[lo : lo + _SOLVE_BATCH] = phi.T
    return out


def heat_geodesic_matrix(lap: PointCloudLaplacian, cloud: PointCloud,
                         time_multiplier: float = 1.0) -> GeodesicMatrix:
    """All-pairs heat geodesics, symmetrized as (M + M^T) / 2 with zero diagonal."""
    raw = heat_geodesics(lap, cloud, sources=None, time_multiplier=time_multiplier)
    sym = 0.5 * (raw + raw.T)
    np.fill_diagonal(sym, 0.0)
    return GeodesicMatrix(distances=sym)


def geodesic_similarity_loss(features: np.ndarray, geo: GeodesicMatrix, k: int = 10) -> float:
    """Mean cosine dissimilarity between embedding-space and geodesic kNN distances.

    For each point, take its k nearest feature rows (self excluded, ties by
    index), pair the ascending embedding distances with the geodesic distances
    to the same indices, and average 1 - cos(d, m). Zero vectors contribute 0.
    """
    f = np.asarray(features, dtype=np.float64)
    n = f.shape[0]
    if n != len(geo):
        raise ValueError("feature rows must match geodesic matrix dimension")
    if not 0 < k < n:
        raise ValueError(f"k={k} must satisfy 0 < k < N={n}")
    idx_all, dist_all = knn(f, f, k + 1)
    # drop each row's own index (present somewhere in the first k+1 by distance 0)
    keep_idx = np.empty((n, k), dtype=np.int64)
    keep_d = np.empty((n, k))
    self_col = idx_all == np.arange(n)[:, None]
    for i in range(n):
        cols = np.flatnonzero(self_col[i])
        drop = cols[0] if cols.size else k  # duplicates may shadow the self index
        sel = np.concatenate([np.arange(drop), np.arange(drop + 1, k + 1)])
        keep_idx[i] = idx_all[i, sel]
        keep_d[i] = dist_all[i, sel]
    m = geo.distances[np.arange(n)[:, None], keep_idx]
    if not np.isfinite(m).all():
        raise ValueError("geodesic distances for selected neighbors are not finite")
    dot = np.einsum("nk,nk->n", keep_d, m)
    norms = np.linalg.norm(keep_d, axis=1) * np.linalg.norm(m, axis=1)
    cos = np.ones(n)
    nonzero = norms > 0
    cos[nonzero] = dot[nonzero] / norms[nonzero]
    return float(np.mean(1.0 - cos))
