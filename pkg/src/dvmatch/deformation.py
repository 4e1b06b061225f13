"""Embedded deformation: node graph, 6D rotations, transform propagation and ARAP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PointCloud, SelectionMatrix, chamfer, farthest_point_sample, knn, one_sided_chamfer

__all__ = [
    "DegenerateRotationError",
    "DeformationGraph",
    "TransformSet",
    "build_deformation_graph",
    "rotation_from_6d",
    "rotations_from_6d",
    "identity_transforms",
    "deform",
    "arap_energy",
    "deformation_loss",
]

DEFAULT_NODE_NEIGHBORS = 6
DEFAULT_SKIN_NEIGHBORS = 4


class DegenerateRotationError(ValueError):
    pass


@dataclass(frozen=True)
class DeformationGraph:
    """FPS nodes, their symmetrized neighbor graph, and per-point skinning weights."""

    nodes: np.ndarray  # (m, 3) node positions, = selection.apply(source points)
    selection: SelectionMatrix
    edges: np.ndarray  # (E, 2) directed node-adjacency pairs (both directions)
    skin_idx: np.ndarray  # (N, k_eff) node index per skinning slot
    skin_w: np.ndarray  # (N, k_eff) nonnegative weights, rows sum to 1

    def __post_init__(self):
        for name in ("nodes", "edges", "skin_idx", "skin_w"):
            arr = getattr(self, name)
            arr = np.asarray(arr)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def node_count(self):
        return self.nodes.shape[0]

    def node_neighbors(self, h: int) -> np.ndarray:
        """Neighbor list of node h (derived from the directed edge array)."""
        return self.edges[self.edges[:, 0] == h, 1]


@dataclass(frozen=True)
class TransformSet:
    """Per-node 6D rotation parameters and translations."""

    theta: np.ndarray  # (m, 6)
    delta: np.ndarray  # (m, 3)

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=np.float64)
        de = np.asarray(self.delta, dtype=np.float64)
        if th.ndim != 2 or th.shape[1] != 6:
            raise ValueError("theta must be (m, 6)")
        if de.shape != (th.shape[0], 3):
            raise ValueError("delta must be (m, 3) matching theta")
        if not (np.isfinite(th).all() and np.isfinite(de).all()):
            raise ValueError("transform parameters must be finite")
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "delta", de)

    @property
    def node_count(self):
        return self.theta.shape[0]


def identity_transforms(m: int) -> TransformSet:
    theta = np.tile(np.array([1.0, 0, 0, 0, 1.0, 0]), (m, 1))
    return TransformSet(theta=theta, delta=np.zeros((m, 3)))


def build_deformation_graph(source: PointCloud, node_count: int | None = None,
                            k_node: int = DEFAULT_NODE_NEIGHBORS,
                            k_skin: int = DEFAULT_SKIN_NEIGHBORS,
                            seed: int = 0) -> DeformationGraph:
    """FPS nodes with a symmetrized k_node-NN node graph and (1 - d/d_max)^2 skinning.

    d_max is the distance to the (k_skin+1)-th nearest node; when fewer nodes
    exist the kernel falls back to twice the farthest used distance. Weight rows
    normalize to 1; a point coincident with a node takes weight 1 there.
    """
    n = len(source)
    if node_count is None:
        node_count = max(1, n // 2)
    if node_count < 1 or node_count > n:
        raise ValueError(f"node_count={node_count} must be in [1, {n}]")
    selection = farthest_point_sample(source, node_count, seed=seed)
    nodes = selection.apply(source.points)
    m = node_count

    if m > 1:
        kn = min(k_node, m - 1)
        nbr_idx, _ = knn(nodes, nodes, kn + 1)
        heads = np.repeat(np.arange(m), kn)
        tails = nbr_idx[:, 1:].reshape(-1)
        pairs = np.stack([heads, tails], axis=1)
        undirected = {(min(a, b), max(a, b)) for a, b in pairs}
        edges = np.array(
            sorted([(a, b) for a, b in undirected] + [(b, a) for a, b in undirected]),
            dtype=np.int64,
        )
    else:
        edges = np.zeros((0, 2), dtype=np.int64)

    k_eff = min(k_skin, m)
    idx, dist = knn(source.points, nodes, min(k_eff + 1, m))
    skin_idx = idx[:, :k_eff]
    skin_d = dist[:, :k_eff]
    if m > k_eff:
        d_max = dist[:, k_eff]
    else:
        d_max = 2.0 * skin_d.max(axis=1)
    w = np.zeros_like(skin_d)
    pos = d_max > 0
    w[pos] = (1.0 - skin_d[pos] / d_max[pos, None]) ** 2
    w[~pos, 0] = 1.0  # coincident collapse: all mass on the nearest node
    sums = w.sum(axis=1)
    flat = sums <= 0  # every used node tied at exactly d_max
    w[flat] = 1.0 / k_eff
    sums[flat] = 1.0
    w /= sums[:, None]
    return DeformationGraph(nodes=nodes, selection=selection, edges=edges,
                            skin_idx=skin_idx, skin_w=w)


def rotations_from_6d(theta: np.ndarray) -> np.ndarray:
    """Batch Gram-Schmidt: (m, 6) -> (m, 3, 3) rotations with columns [b1 b2 b3]."""
    th = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    a1, a2 = th[:, :3], th[:, 3:]
    n1 = np.linalg.norm(a1, axis=1)
    bad = n1 <= 1e-12 * max(1.0, np.abs(th).max())
    if bad.any():
        raise DegenerateRotationError(f"zero first 3-vector at node {int(np.flatnonzero(bad)[0])}")
    b1 = a1 / n1[:, None]
    proj = np.einsum("ij,ij->i", a2, b1)
    v = a2 - proj[:, None] * b1
    n2 = np.linalg.norm(v, axis=1)
    bad = n2 <= 1e-12 * np.maximum(1e-300, np.linalg.norm(a2, axis=1))
    if bad.any():
        raise DegenerateRotationError(
            f"second 3-vector parallel to first at node {int(np.flatnonzero(bad)[0])}"
        )
    b2 = v / n2[:, None]
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=2)


def rotation_from_6d(theta) -> np.ndarray:
    """Single 6-vector to a 3x3 rotation (orthonormal, det +1)."""
    return rotations_from_6d(np.asarray(theta).reshape(1, 6))[0]


def deform(graph: DeformationGraph, transforms: TransformSet, source: PointCloud) -> PointCloud:
    """Blend node-anchored rigid motions: sum_h w_h (R_h (p - g_h) + g_h + delta_h)."""
    if transforms.node_count != graph.node_count:
        raise ValueError("transform count does not match graph nodes")
    if len(source) != graph.skin_idx.shape[0]:
        raise ValueError("source size does not match graph skinning")
    rot = rotations_from_6d(transforms.theta)  # (m, 3, 3)
    idx = graph.skin_idx
    rel = source.points[:, None, :] - graph.nodes[idx]  # (N, k, 3)
    # R(p-g)+g+delta written as p + (R-I)(p-g) + delta: identical since the
    # weights sum to 1, and exact under the identity transform
    correction = np.einsum("nkij,nkj->nki", rot[idx] - np.eye(3), rel)
    correction += transforms.delta[idx]
    return PointCloud(source.points + np.einsum("nk,nki->ni", graph.skin_w, correction))


def arap_energy(graph: DeformationGraph, transforms: TransformSet) -> float:
    """Mean squared rigidity residual over directed node edges.

    Residual per edge (h, l): R_h (g_l - g_h) + delta_h + g_h - (g_l + delta_l);
    zero exactly when all nodes share one rigid motion.
    """
    if transforms.node_count != graph.node_count:
        raise ValueError("transform count does not match graph nodes")
    if graph.edges.shape[0] == 0:
        return 0.0
    rot = rotations_from_6d(transforms.theta)
    h, l = graph.edges[:, 0], graph.edges[:, 1]
    e = graph.nodes[l] - graph.nodes[h]
    # R e + delta_h + g_h - (g_l + delta_l) grouped as (R - I) e + delta_h - delta_l
    d = np.einsum("eij,ej->ei", rot[h] - np.eye(3), e) + transforms.delta[h] - transforms.delta[l]
    return float(np.mean(np.sum(d * d, axis=1)))


def deformation_loss(graph: DeformationGraph, transforms: TransformSet,
                     source: PointCloud, target: PointCloud, mode: str = "full") -> float:
    """Chamfer between the deformed source and the target; one-sided in partial mode."""
    deformed = deform(graph, transforms, source)
    if mode == "full":
        return chamfer(deformed, target)
    if mode == "partial":
        return one_sided_chamfer(deformed, target)
    raise ValueError(f"mode must be 'full' or 'partial', got {mode!r}")
