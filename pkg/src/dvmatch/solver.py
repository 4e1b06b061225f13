"""Alternating registration: refresh correspondences, descend the deformation loss."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .core import PointCloud, chamfer, knn, normalize_cloud, one_sided_chamfer
from .deformation import (
    DeformationGraph,
    TransformSet,
    arap_energy,
    build_deformation_graph,
    deform,
    identity_transforms,
    rotations_from_6d,
)
from .geodesics import (
    GeodesicMatrix,
    build_laplacian,
    geodesic_similarity_loss,
    heat_geodesic_matrix,
)
from .matching import (
    DEFAULT_TEMPERATURE,
    DEFAULT_TOP_N,
    LossWeights,
    smoothness_loss,
    soft_correspondence,
)
from .projection import FeatureBlend, compose_input_features, positional_encoding

__all__ = [
    "SolverError",
    "SolverConfig",
    "SolveReport",
    "FrozenAssignments",
    "freeze_assignments",
    "frozen_objective",
    "loss_gradient",
    "fd_gradient",
    "register",
    "match_pair",
]

_MAX_HALVINGS = 30


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    outer_iters: int = 30
    inner_iters: int = 25
    step_size: float = 0.05
    step_decay: float = 0.97
    weights: LossWeights = field(default_factory=LossWeights)
    top_n: int = DEFAULT_TOP_N
    temperature: float = DEFAULT_TEMPERATURE
    mode: str = "full"  # 'full' | 'partial'
    fd_check: bool = False
    seed: int = 0
    # deformation-graph knobs travel with the solver since register builds graphs
    node_count: int | None = None
    k_node: int = 6
    k_skin: int = 4
    geo_neighbors: int = 10
    blend: FeatureBlend = field(default_factory=FeatureBlend)
    min_rel_decrease: float = 1e-6
    # descent shaping: node-graph smoothing of the gradient direction, the
    # relative rigid-fit gain below which non-rigid refinement engages, and
    # the number of exact local-global fitting sweeps closing each phase
    grad_smoothing: float = 50.0
    rigid_gate: float = 0.02
    armijo: float = 0.3
    fit_sweeps: int = 3

    def __post_init__(self):
        if self.outer_iters < 1 or self.inner_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not 0 < self.step_decay <= 1:
            raise ValueError("step_decay must lie in (0, 1]")
        if self.mode not in ("full", "partial"):
            raise ValueError("mode must be 'full' or 'partial'")
        if self.grad_smoothing < 0 or self.rigid_gate < 0 or self.fit_sweeps < 0:
            raise ValueError("grad_smoothing, rigid_gate, fit_sweeps must be nonnegative")
        if not 0 <= self.armijo < 1:
            raise ValueError("armijo must lie in [0, 1)")


@dataclass(frozen=True)
class SolveReport:
    transforms: TransformSet  # source -> target direction
    transforms_reverse: TransformSet | None  # target -> source (full mode)
    dense_map: np.ndarray  # (N,) target index per source point
    history: tuple  # per outer iteration: dict of unweighted terms + weighted total
    converged: bool
    mode: str
    wall_time: float


@dataclass(frozen=True)
class FrozenAssignments:
    """Nearest-neighbor assignments pinning the chamfer terms for one descent phase."""

    forward: np.ndarray  # (N,) target index nearest each deformed source point
    backward: np.ndarray | None  # (M,) source index nearest each target point


def freeze_assignments(deformed: PointCloud, target: PointCloud, mode: str) -> FrozenAssignments:
    fwd, _ = knn(deformed, target, 1)
    if mode == "partial":
        return FrozenAssignments(forward=fwd[:, 0], backward=None)
    bwd, _ = knn(target, deformed, 1)
    return FrozenAssignments(forward=fwd[:, 0], backward=bwd[:, 0])


def frozen_objective(graph: DeformationGraph, transforms: TransformSet,
                     source: PointCloud, target: PointCloud,
                     frozen: FrozenAssignments, weights: LossWeights,
                     mode: str = "full") -> float:
    """lambda_deform * chamfer(fixed assignments) + lambda_arap * ARAP.

    Smooth in the transforms because the assignments do not move; the
    smoothness and geodesic terms are constant here and excluded.
    """
    deformed = deform(graph, transforms, source).points
    t = target.points
    cd = np.sum((deformed - t[frozen.forward]) ** 2, axis=1).mean()
    if mode == "full":
        if frozen.backward is None:
            raise ValueError("full mode requires backward assignments")
        cd += np.sum((t - deformed[frozen.backward]) ** 2, axis=1).mean()
    return float(weights.deform * cd + weights.arap * arap_energy(graph, transforms))


def _rotation_backprop(theta: np.ndarray, grad_rot: np.ndarray) -> np.ndarray:
    """Chain d(loss)/dR through the Gram-Schmidt map back to the 6 parameters."""
    a1, a2 = theta[:, :3], theta[:, 3:]
    n1 = np.linalg.norm(a1, axis=1, keepdims=True)
    b1 = a1 / n1
    proj = np.einsum("mi,mi->m", a2, b1)[:, None]
    v = a2 - proj * b1
    n2 = np.linalg.norm(v, axis=1, keepdims=True)
    b2 = v / n2

    g1 = grad_rot[:, :, 0]
    g2 = grad_rot[:, :, 1]
    g3 = grad_rot[:, :, 2]
    # b3 = b1 x b2 contributes to both column gradients
    g_b1 = g1 + np.cross(b2, g3)
    g_b2 = g2 + np.cross(g3, b1)

    def remove_parallel(vec, unit):
        return vec - np.einsum("mi,mi->m", vec, unit)[:, None] * unit

    g_v = remove_parallel(g_b2, b2) / n2
    g_a2 = remove_parallel(g_v, b1)
    g_b1_total = g_b1 - np.einsum("mi,mi->m", g_v, b1)[:, None] * a2 - proj * g_v
    g_a1 = remove_parallel(g_b1_total, b1) / n1
    return np.hstack([g_a1, g_a2])


def loss_gradient(graph: DeformationGraph, transforms: TransformSet,
                  source: PointCloud, target: PointCloud,
                  frozen: FrozenAssignments, weights: LossWeights,
                  mode: str = "full"):
    """Analytic gradient of the frozen objective over (theta, delta).

    Returns (grad_theta (m, 6), grad_delta (m, 3)). The smoothness and
    geodesic terms carry no dependence on the transforms and contribute zero.
    """
    m = graph.node_count
    n = len(source)
    t = target.points
    rot = rotations_from_6d(transforms.theta)
    idx = graph.skin_idx  # (N, k)
    w = graph.skin_w
    rel = source.points[:, None, :] - graph.nodes[idx]  # (N, k, 3)
    moved = source.points + np.einsum(
        "nk,nki->ni", w, np.einsum("nkij,nkj->nki", rot[idx] - np.eye(3), rel)
        + transforms.delta[idx]
    )

    # chamfer sensitivity at each deformed point under the pinned assignments
    d_points = (2.0 / n) * (moved - t[frozen.forward])
    if mode == "full":
        if frozen.backward is None:
            raise ValueError("full mode requires backward assignments")
        contrib = (2.0 / t.shape[0]) * (moved[frozen.backward] - t)
        np.add.at(d_points, frozen.backward, contrib)
    d_points *= weights.deform

    grad_rot = np.zeros((m, 3, 3))
    grad_delta = np.zeros((m, 3))
    for k in range(idx.shape[1]):
        wk = w[:, k][:, None]
        np.add.at(grad_delta, idx[:, k], wk * d_points)
        outer = np.einsum("ni,nj->nij", wk * d_points, rel[:, k, :])
        np.add.at(grad_rot, idx[:, k], outer)

    edges = graph.edges
    if edges.shape[0] and weights.arap > 0:
        h, l = edges[:, 0], edges[:, 1]
        e = graph.nodes[l] - graph.nodes[h]
        d = (np.einsum("eij,ej->ei", rot[h] - np.eye(3), e)
             + transforms.delta[h] - transforms.delta[l])
        coeff = weights.arap * 2.0 / edges.shape[0]
        np.add.at(grad_rot, h, coeff * np.einsum("ei,ej->eij", d, e))
        np.add.at(grad_delta, h, coeff * d)
        np.add.at(grad_delta, l, -coeff * d)

    grad_theta = _rotation_backprop(transforms.theta, grad_rot)
    return grad_theta, grad_delta


def fd_gradient(graph, transforms, source, target, frozen, weights,
                mode="full", step=1e-5):
    """Central-difference gradient of the frozen objective (test oracle)."""
    def obj(theta, delta):
        return frozen_objective(graph, TransformSet(theta=theta, delta=delta),
                                source, target, frozen, weights, mode)

    gt = np.zeros_like(transforms.theta)
    gd = np.zeros_like(transforms.delta)
    for arr, grad in ((transforms.theta, gt), (transforms.delta, gd)):
        flat = arr.reshape(-1)
        for i in range(flat.size):
            bump = np.zeros_like(flat)
            bump[i] = step
            plus = (arr.reshape(-1) + bump).reshape(arr.shape)
            minus = (arr.reshape(-1) - bump).reshape(arr.shape)
            if arr is transforms.theta:
                hi, lo = obj(plus, transforms.delta), obj(minus, transforms.delta)
            else:
                hi, lo = obj(transforms.theta, plus), obj(transforms.theta, minus)
            grad.reshape(-1)[i] = (hi - lo) / (2 * step)
    return gt, gd


def _check_gradient(graph, transforms, source, target, frozen, weights, mode):
    gt, gd = loss_gradient(graph, transforms, source, target, frozen, weights, mode)
    ft, fd_ = fd_gradient(graph, transforms, source, target, frozen, weights, mode)
    for analytic, numeric, name in ((gt, ft, "theta"), (gd, fd_, "delta")):
        denom = np.maximum(np.abs(numeric), 1e-8 / 1e-4)
        rel = np.abs(analytic - numeric) / denom
        if rel.max() > 1e-4:
            worst = np.unravel_index(rel.argmax(), rel.shape)
            raise SolverError(
                f"gradient check failed on {name}{worst}: "
                f"analytic {analytic[worst]:.3e} vs fd {numeric[worst]:.3e}"
            )


@dataclass
class _Direction:
    source: PointCloud
    target: PointCloud
    visual_source: np.ndarray | None
    visual_target: np.ndarray | None
    geo: GeodesicMatrix | None
    graph: DeformationGraph
    transforms: TransformSet
    preconditioner: object = None  # factorized (I + alpha * L_node)
    skin_matrix: object = None  # (N, m) sparse skinning weights
    edge_incidence: object = None  # (E, m) sparse +1/-1 node incidence


def _node_preconditioner(graph: DeformationGraph, alpha: float):
    m = graph.node_count
    if alpha == 0.0 or graph.edges.shape[0] == 0:
        return None
    h, l = graph.edges[:, 0], graph.edges[:, 1]
    adj = sp.coo_matrix((np.ones(h.size), (h, l)), shape=(m, m)).tocsr()
    lap = sp.diags(np.asarray(adj.sum(axis=1)).reshape(-1)) - adj
    return splu((sp.eye(m) + alpha * lap).tocsc())


def _skin_matrix(graph: DeformationGraph):
    n, k = graph.skin_idx.shape
    rows = np.repeat(np.arange(n), k)
    return sp.coo_matrix(
        (graph.skin_w.reshape(-1), (rows, graph.skin_idx.reshape(-1))),
        shape=(n, graph.node_count),
    ).tocsr()


def _edge_incidence(graph: DeformationGraph):
    e = graph.edges.shape[0]
    if e == 0:
        return sp.csr_matrix((0, graph.node_count))
    rows = np.repeat(np.arange(e), 2)
    cols = graph.edges.reshape(-1)
    vals = np.tile([1.0, -1.0], e)
    return sp.coo_matrix((vals, (rows, cols)), shape=(e, graph.node_count)).tocsr()


def _local_global_sweeps(d: _Direction, x: TransformSet, frozen: FrozenAssignments,
                         weights: LossWeights, mode: str, sweeps: int) -> TransformSet:
    """Classical alternation on the frozen least-squares objective.

    Global step: the translations minimizing the objective exactly (three
    independent sparse SPD solves). Local step: per-node closed-form rotation
    fits, swept in index order. Every substep is an exact minimization, so the
    frozen objective never increases.
    """
    graph, src, tgt = d.graph, d.source.points, d.target.points
    n, m = src.shape[0], graph.node_count
    lam_d, lam_a = weights.deform, weights.arap
    A = d.skin_matrix
    B = d.edge_incidence
    e_cnt = graph.edges.shape[0]
    a_fwd = frozen.forward
    a_bwd = frozen.backward if mode == "full" else None

    # the quadratic form over translations is fixed for the whole phase
    hess = (lam_d / n) * (A.T @ A)
    if a_bwd is not None:
        A_b = A[a_bwd]
        hess = hess + (lam_d / tgt.shape[0]) * (A_b.T @ A_b)
    if e_cnt and lam_a > 0:
        hess = hess + (lam_a / e_cnt) * (B.T @ B)
    hess = hess + 1e-12 * sp.eye(m)
    solve = splu(hess.tocsc())

    idx, w = graph.skin_idx, graph.skin_w
    rel = src[:, None, :] - graph.nodes[idx]  # (N, k, 3)
    theta, delta = x.theta, x.delta
    for _ in range(sweeps):
        rot = rotations_from_6d(theta)
        # global: exact translation fit given rotations
        base = src + np.einsum("nk,nki->ni", w,
                               np.einsum("nkij,nkj->nki", rot[idx] - np.eye(3), rel))
        rhs = (lam_d / n) * (A.T @ (tgt[a_fwd] - base))
        if a_bwd is not None:
            rhs += (lam_d / tgt.shape[0]) * (A_b.T @ (tgt - base[a_bwd]))
        if e_cnt and lam_a > 0:
            q = np.einsum("eij,ej->ei", rot[graph.edges[:, 0]] - np.eye(3),
                          graph.nodes[graph.edges[:, 1]] - graph.nodes[graph.edges[:, 0]])
            rhs += -(lam_a / e_cnt) * (B.T @ q)
        delta = solve.solve(rhs)

        # local: per-node best rotation given everything else (Gauss-Seidel)
        rot = rot.copy()
        anchored = np.einsum("nkij,nkj->nki", rot[idx] - np.eye(3), rel)
        deformed = src + np.einsum("nk,nki->ni", w, anchored + delta[idx])
        resid_fwd = tgt[a_fwd] - deformed  # (N, 3)
        bwd_count = np.zeros(n)
        resid_bwd_sum = np.zeros((n, 3))
        if a_bwd is not None:
            np.add.at(bwd_count, a_bwd, 1.0)
            np.add.at(resid_bwd_sum, a_bwd, tgt - deformed[a_bwd])
        edge_h = graph.edges[:, 0] if e_cnt else np.zeros(0, dtype=int)
        edge_l = graph.edges[:, 1] if e_cnt else np.zeros(0, dtype=int)
        evec = (graph.nodes[edge_l] - graph.nodes[edge_h]) if e_cnt else None
        for node in range(m):
            slots = np.nonzero(idx == node)
            pts_i, col = slots
            if pts_i.size == 0 and not e_cnt:
                continue
            cov = np.zeros((3, 3))
            if pts_i.size:
                u_vec = w[pts_i, col][:, None] * rel[pts_i, col, :]
                cur = np.einsum("ij,nj->ni", rot[node], u_vec)
                z = resid_fwd[pts_i] + cur
                cov += (lam_d / n) * (z.T @ u_vec)
                if a_bwd is not None:
                    cnt = bwd_count[pts_i]
                    has = cnt > 0
                    if has.any():
                        zb = resid_bwd_sum[pts_i[has]] + cnt[has, None] * cur[has]
                        cov += (lam_d / tgt.shape[0]) * (zb.T @ u_vec[has])
            if e_cnt and lam_a > 0:
                sel = edge_h == node
                if sel.any():
                    ev = evec[sel]
                    zt = (graph.nodes[edge_l[sel]] + delta[edge_l[sel]]
                          - graph.nodes[node] - delta[node])
                    cov += (lam_a / e_cnt) * (zt.T @ ev)
            uu, _, vv = np.linalg.svd(cov)
            r_new = uu @ vv
            if np.linalg.det(r_new) < 0:
                uu[:, -1] *= -1
                r_new = uu @ vv
            if pts_i.size:
                # keep the shared residual caches in sync with the update
                new_cur = np.einsum("ij,nj->ni", r_new, u_vec)
                shift = new_cur - cur
                np.subtract.at(resid_fwd, pts_i, shift)
                if a_bwd is not None:
                    deformed_shift = np.zeros((n, 3))
                    np.add.at(deformed_shift, pts_i, shift)
                    if bwd_count.any():
                        resid_bwd_sum -= bwd_count[:, None] * deformed_shift
            rot[node] = r_new
        theta = np.concatenate([rot[:, :, 0], rot[:, :, 1]], axis=1)
    return TransformSet(theta=theta, delta=delta)


def _rigid_fit_candidate(d: _Direction, x: TransformSet, frozen: FrozenAssignments,
                         mode: str) -> TransformSet:
    """Best global rigid correction of the deformed cloud onto the frozen pairs.

    Composing a global rigid motion onto every node leaves the rigidity residual
    unchanged, so this candidate moves only the chamfer term; it is accepted
    through the same non-increase test as any other step.
    """
    deformed = deform(d.graph, x, d.source).points
    t = d.target.points
    pts = [deformed]
    tgts = [t[frozen.forward]]
    wts = [np.full(deformed.shape[0], 1.0 / deformed.shape[0])]
    if mode == "full" and frozen.backward is not None:
        pts.append(deformed[frozen.backward])
        tgts.append(t)
        wts.append(np.full(t.shape[0], 1.0 / t.shape[0]))
    p = np.vstack(pts)
    q = np.vstack(tgts)
    w = np.concatenate(wts)
    wsum = w.sum()
    mu_p = (w[:, None] * p).sum(axis=0) / wsum
    mu_q = (w[:, None] * q).sum(axis=0) / wsum
    cov = ((p - mu_p) * w[:, None]).T @ (q - mu_q)
    u, _, vt = np.linalg.svd(cov)
    rot = vt.T @ u.T
    if np.linalg.det(rot) < 0:
        vt[-1] *= -1
        rot = vt.T @ u.T
    trans = mu_q - rot @ mu_p
    node_rot = np.einsum("ij,mjk->mik", rot, rotations_from_6d(x.theta))
    theta = np.concatenate([node_rot[:, :, 0], node_rot[:, :, 1]], axis=1)
    delta = (d.graph.nodes + x.delta) @ rot.T + trans - d.graph.nodes
    return TransformSet(theta=theta, delta=delta)


def _direction_pass(d: _Direction, cfg: SolverConfig, step_size: float):
    """One outer iteration for one direction; returns (pi, terms)."""
    deformed = deform(d.graph, d.transforms, d.source)
    feat_src = compose_input_features(d.visual_source, positional_encoding(deformed),
                                      cfg.blend)
    feat_tgt = compose_input_features(d.visual_target, positional_encoding(d.target),
                                      cfg.blend)
    pi = soft_correspondence(feat_src, feat_tgt, top_n=cfg.top_n,
                             temperature=cfg.temperature)
    frozen = freeze_assignments(deformed, d.target, cfg.mode)

    x = d.transforms
    obj = frozen_objective(d.graph, x, d.source, d.target, frozen, cfg.weights, cfg.mode)

    # closed-form global rigid candidate first; its relative gain gates the
    # per-node refinement so rigid alignment completes before local freedom opens
    candidate = _rigid_fit_candidate(d, x, frozen, cfg.mode)
    cand_obj = frozen_objective(d.graph, candidate, d.source, d.target, frozen,
                                cfg.weights, cfg.mode)
    rigid_gain = 0.0
    if cand_obj <= obj:
        rigid_gain = (obj - cand_obj) / max(obj, 1e-300)
        x, obj = candidate, cand_obj

    if rigid_gain <= cfg.rigid_gate:
        for inner in range(cfg.inner_iters):
            if cfg.fd_check and inner == 0:
                _check_gradient(d.graph, x, d.source, d.target, frozen,
                                cfg.weights, cfg.mode)
            gt, gd = loss_gradient(d.graph, x, d.source, d.target, frozen,
                                   cfg.weights, cfg.mode)
            # alternate smoothed (coherent, low-frequency) and raw (local
            # snapping) descent directions
            if d.preconditioner is not None and inner % 2 == 0:
                pgt = d.preconditioner.solve(gt)
                pgd = d.preconditioner.solve(gd)
            else:
                pgt, pgd = gt, gd
            gnorm = np.sqrt((pgt * pgt).sum() + (pgd * pgd).sum())
            if gnorm == 0.0:
                break
            # step_size is a parameter-space displacement along the smoothed
            # unit direction; slope of the true objective along it gates the
            # sufficient-decrease test
            dir_t, dir_d = pgt / gnorm, pgd / gnorm
            slope = float((gt * dir_t).sum() + (gd * dir_d).sum())
            step = step_size
            accepted = None
            for _ in range(_MAX_HALVINGS):
                trial = TransformSet(theta=x.theta - step * dir_t,
                                     delta=x.delta - step * dir_d)
                trial_obj = frozen_objective(d.graph, trial, d.source, d.target,
                                             frozen, cfg.weights, cfg.mode)
                if trial_obj <= obj - cfg.armijo * step * slope:
                    accepted = (trial, trial_obj)
                    break
                step *= 0.5
            if accepted is None:
                break  # stationary for this phase
            x, obj = accepted
        if cfg.fit_sweeps > 0:
            swept = _local_global_sweeps(d, x, frozen, cfg.weights, cfg.mode,
                                         cfg.fit_sweeps)
            swept_obj = frozen_objective(d.graph, swept, d.source, d.target, frozen,
                                         cfg.weights, cfg.mode)
            if swept_obj <= obj:
                x, obj = swept, swept_obj
    d.transforms = x

    deformed = deform(d.graph, x, d.source)
    if cfg.mode == "full":
        deform_term = chamfer(deformed, d.target)
    else:
        deform_term = one_sided_chamfer(deformed, d.target)
    terms = {
        "deform": deform_term,
        "arap": arap_energy(d.graph, x),
        "smooth": smoothness_loss(pi, d.target),
        "geo": 0.0,
    }
    if d.geo is not None and cfg.weights.geo > 0:
        terms["geo"] = geodesic_similarity_loss(feat_src, d.geo, k=cfg.geo_neighbors)
    return pi, terms


def register(source: PointCloud, target: PointCloud,
             visual_source: np.ndarray | None = None,
             visual_target: np.ndarray | None = None,
             geo_source: GeodesicMatrix | None = None,
             config: SolverConfig = SolverConfig()) -> SolveReport:
    """Alternate correspondence refresh and frozen-assignment descent on the transforms.

    Expects normalized clouds with features row-matched to them. Full mode also
    optimizes the reverse direction with its own transform set; partial mode
    keeps only source -> target. The final dense map sends each deformed source
    point to its nearest target point (ties to the lowest index).
    """
    t_start = time.perf_counter()
    if visual_source is not None and np.asarray(visual_source).shape[0] != len(source):
        raise ValueError("visual_source rows must match the source cloud")
    if visual_target is not None and np.asarray(visual_target).shape[0] != len(target):
        raise ValueError("visual_target rows must match the target cloud")
    if geo_source is not None and len(geo_source) != len(source):
        raise ValueError("geodesic matrix must cover the source cloud")

    def make_direction(src, tgt, vis_src, vis_tgt, geo):
        graph = build_deformation_graph(src, node_count=config.node_count,
                                        k_node=config.k_node, k_skin=config.k_skin,
                                        seed=config.seed % len(src))
        return _Direction(source=src, target=tgt, visual_source=vis_src,
                          visual_target=vis_tgt, geo=geo, graph=graph,
                          transforms=identity_transforms(graph.node_count),
                          preconditioner=_node_preconditioner(graph, config.grad_smoothing),
                          skin_matrix=_skin_matrix(graph),
                          edge_incidence=_edge_incidence(graph))

    directions = [make_direction(source, target, visual_source, visual_target, geo_source)]
    if config.mode == "full":
        directions.append(make_direction(target, source, visual_target, visual_source, None))
    fwd = directions[0]

    history = []
    step_size = config.step_size
    prev_optimized = None
    converged = False
    for outer in range(config.outer_iters):
        entry = {"iter": outer, "deform": 0.0, "arap": 0.0, "smooth": 0.0, "geo": 0.0}
        for d in directions:
            _, terms = _direction_pass(d, config, step_size)
            for key, val in terms.items():
                entry[key] += val
        entry["total"] = (config.weights.deform * entry["deform"]
                          + config.weights.arap * entry["arap"]
                          + config.weights.smooth * entry["smooth"]
                          + config.weights.geo * entry["geo"])
        if not np.isfinite(entry["total"]):
            raise SolverError(f"non-finite total loss at outer iteration {outer}: {entry}")
        history.append(entry)
        # stop on the optimized portion of the total: the smoothness/geodesic
        # terms track the feature refresh, not the descent, and jitter at
        # refresh boundaries
        optimized = (config.weights.deform * entry["deform"]
                     + config.weights.arap * entry["arap"])
        if prev_optimized is not None:
            if prev_optimized - optimized < config.min_rel_decrease * max(prev_optimized, 1e-300):
                converged = True
                break
        prev_optimized = optimized
        step_size *= config.step_decay

    deformed = deform(fwd.graph, fwd.transforms, source)
    final_map, _ = knn(deformed, target, 1)
    return SolveReport(
        transforms=fwd.transforms,
        transforms_reverse=directions[1].transforms if config.mode == "full" else None,
        dense_map=final_map[:, 0],
        history=tuple(history),
        converged=converged,
        mode=config.mode,
        wall_time=time.perf_counter() - t_start,
    )


def _load_visual_features(features_dir, cloud: PointCloud):
    """Per-point visual features from a directory of {z,x,y}.dvfm view files.

    Projection records are recomputed from the cloud at each file's resolution;
    a sibling {axis}.dvpr, when present, must agree with the cloud size.
    """
    from .io_formats import read_dvfm, read_dvpr
    from .projection import AXES, project_depth, pull_back_features

    features_dir = Path(features_dir)
    per_view = []
    for axis in AXES:
        fpath = features_dir / f"{axis}.dvfm"
        if not fpath.exists():
            raise FileNotFoundError(f"missing feature file {fpath}")
        feat = read_dvfm(fpath)
        h, w, _ = feat.values.shape
        rpath = features_dir / f"{axis}.dvpr"
        if rpath.exists():
            stored = read_dvpr(rpath, axis=axis, height=h, width=w)
            if len(stored) != len(cloud):
                raise ValueError(
                    f"{rpath} holds {len(stored)} points but the cloud has {len(cloud)}"
                )
            rec = stored
        else:
            _, rec = project_depth(cloud, axis, h, w)
        per_view.append(pull_back_features(feat, rec))
    from .projection import assemble_visual_features

    return assemble_visual_features(*per_view)


def match_pair(source_raw: PointCloud, target_raw: PointCloud,
               config: SolverConfig = SolverConfig(),
               features_source=None, features_target=None,
               geo_source: GeodesicMatrix | None = None,
               compute_geodesics: bool = True,
               laplacian_k: int = 8, heat_time_multiplier: float = 1.0):
    """Normalize, gather features, optionally compute geodesics, register.

    Returns (dense_map, SolveReport); map indices refer to the raw input order,
    which all stages preserve.
    """
    source, _ = normalize_cloud(source_raw)
    target, _ = normalize_cloud(target_raw)
    visual_source = (_load_visual_features(features_source, source)
                     if features_source is not None else None)
    visual_target = (_load_visual_features(features_target, target)
                     if features_target is not None else None)
    geo = geo_source
    if config.weights.geo > 0 and geo is None:
        if not compute_geodesics:
            raise SolverError(
                "lambda_geo > 0 but no geodesic matrix was supplied and "
                "geodesic computation is disabled"
            )
        lap = build_laplacian(source, k=laplacian_k)
        geo = heat_geodesic_matrix(lap, source, time_multiplier=heat_time_multiplier)
    report = register(source, target, visual_source=visual_source,
                      visual_target=visual_target, geo_source=geo, config=config)
    return report.dense_map, report
