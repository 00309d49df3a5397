"""Gauss-Newton solver over the deformation graph.

Fixed iteration count (no early exit) per tracking convention; the linear
system J^T J dT = -J^T r is solved by LU with partial pivoting. Every
iteration is recorded on a ForwardTape so the backward pass can reuse the
factorizations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from .energy import (
    LAMBDA_2D,
    LAMBDA_DEPTH,
    LAMBDA_REG,
    CorrArrays,
    assemble_arrays,
)
from .errors import (
    SingularSystemError,
    SolverDivergenceError,
    UnderdeterminedSystemError,
)
from .warpfield import GraphMotion, apply_increment, warp_cloud

SINGULARITY_RTOL = 1e-12


@dataclass
class SolverConfig:
    max_iter: int = 3
    lambda_2d: float = LAMBDA_2D
    lambda_depth: float = LAMBDA_DEPTH
    lambda_reg: float = LAMBDA_REG
    min_cluster_correspondences: int = 2000
    damping: float = 0.0
    correspondence_subsample: int | None = None
    seed: int = 0
    arap_edge_reweight: bool = False

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        lams = (self.lambda_2d, self.lambda_depth, self.lambda_reg)
        if any(l < 0 for l in lams) or not any(l > 0 for l in lams):
            raise ValueError("lambdas must be non-negative and not all zero")


@dataclass
class ClusterFilterResult:
    active_nodes: np.ndarray  # (N,) bool mask over graph nodes
    corr_mask: np.ndarray  # (K,) bool over the correspondence arrays passed in
    dropped_clusters: list
    cluster_counts: dict


@dataclass
class TapeIteration:
    rot: np.ndarray  # (Na, 3, 3) state at assembly
    trans: np.ndarray  # (Na, 3)
    data_blocks: np.ndarray  # (K, 3, M, 6) weighted
    base_data_blocks: np.ndarray  # (K, 3, M, 6) without the importance weight
    r_data: np.ndarray  # (K, 3)
    r_data_unw: np.ndarray  # (K, 3)
    reg_blocks: np.ndarray  # (E, 3, 2, 6)
    r_reg: np.ndarray  # (E, 3)
    q: np.ndarray  # (K, M, 3)
    wp: np.ndarray  # (K, 3)
    use2d: np.ndarray  # (K,)
    lu: tuple  # scipy lu_factor output
    x: np.ndarray  # (6 Na,) increment


@dataclass
class ForwardTape:
    """Everything the reverse pass needs, in active-node-local indexing."""

    nodes: np.ndarray  # (Na, 3) active node positions
    edges: np.ndarray  # (E, 2) local edge pairs
    edge_weights: np.ndarray | None
    arrays: CorrArrays  # reduced correspondence arrays (local anchor ids)
    intrinsics: object
    config: SolverConfig
    active_node_ids: np.ndarray  # (Na,) global node ids
    n_nodes_full: int
    n_corr_full: int
    iterations: list = field(default_factory=list)


@dataclass
class SolveResult:
    motion: GraphMotion  # full-graph motion, identity on inactive nodes
    residual_norms: list
    increments: list
    usable_count: int
    dropped_clusters: list
    node_mask: np.ndarray  # (N,) bool, active nodes
    corr_used_mask: np.ndarray  # (K,) bool over the input correspondence set
    tape: ForwardTape


def filter_clusters(graph, correspondences, skin, min_count):
    """Deactivate node clusters supported by fewer than min_count correspondences.

    A correspondence counts toward every cluster its skinning anchors touch;
    correspondences anchored to a deactivated cluster are masked out.
    """
    h, w_img = skin.anchors.shape[:2]
    px = correspondences.source_px
    inb = (
        (px[:, 0] >= 0) & (px[:, 0] < w_img) & (px[:, 1] >= 0) & (px[:, 1] < h)
    )
    sx = np.clip(px[:, 0], 0, w_img - 1)
    sy = np.clip(px[:, 1], 0, h - 1)
    usable = correspondences.valid & inb & (skin.anchors[sy, sx, 0] >= 0)

    anchors = skin.anchors[sy, sx]  # (K, M)
    clusters = graph.clusters
    n_clusters = int(clusters.max()) + 1 if graph.n_nodes else 0
    counts = np.zeros(n_clusters, dtype=np.int64)
    anchor_clusters = np.where(anchors >= 0, clusters[np.where(anchors < 0, 0, anchors)], -1)
    anchor_clusters[~usable] = -1
    for cid in range(n_clusters):
        counts[cid] = int(np.any(anchor_clusters == cid, axis=1).sum())

    dropped = [cid for cid in range(n_clusters) if counts[cid] < min_count]
    active_nodes = ~np.isin(clusters, dropped)
    if n_clusters and not active_nodes.any():
        raise UnderdeterminedSystemError(
            f"all {n_clusters} node clusters fall below {min_count} correspondences"
        )
    bad = np.isin(anchor_clusters, dropped) & (anchor_clusters >= 0)
    corr_mask = usable & ~bad.any(axis=1)
    return ClusterFilterResult(
        active_nodes=active_nodes,
        corr_mask=corr_mask,
        dropped_clusters=dropped,
        cluster_counts={cid: int(counts[cid]) for cid in range(n_clusters)},
    )


def _reduce_problem(graph, skin, corr, source_points, target_points, config):
    """Subsample, filter clusters, and re-index everything to active nodes."""
    arrays = CorrArrays.from_inputs(source_points, skin, corr, target_points)
    if len(arrays) == 0:
        raise UnderdeterminedSystemError("no usable correspondences")

    if config.correspondence_subsample is not None and len(arrays) > config.correspondence_subsample:
        rng = np.random.default_rng(config.seed)
        pick = rng.choice(len(arrays), size=config.correspondence_subsample, replace=False)
        arrays = arrays.subset(np.sort(pick))

    sub = corr.copy()
    keep = np.zeros(len(corr), dtype=bool)
    keep[arrays.corr_indices] = True
    sub.valid = sub.valid & keep
    filt = filter_clusters(graph, sub, skin, config.min_cluster_correspondences)

    sel = filt.corr_mask[arrays.corr_indices]
    arrays = arrays.subset(np.flatnonzero(sel))
    if len(arrays) == 0:
        raise UnderdeterminedSystemError("cluster filtering removed every correspondence")

    active_ids = np.flatnonzero(filt.active_nodes)
    local = np.full(graph.n_nodes, -1, dtype=np.int32)
    local[active_ids] = np.arange(active_ids.size, dtype=np.int32)
    anchors = arrays.anchors
    arrays.anchors = np.where(anchors >= 0, local[np.where(anchors < 0, 0, anchors)], -1).astype(np.int32)

    pairs = graph.edge_pairs()
    keep_e = filt.active_nodes[pairs[:, 0]] & filt.active_nodes[pairs[:, 1]]
    edges = local[pairs[keep_e]].astype(np.int64)

    edge_weights = None
    if config.arap_edge_reweight and edges.shape[0]:
        nodes_act = graph.nodes[active_ids]
        lens = np.linalg.norm(nodes_act[edges[:, 0]] - nodes_act[edges[:, 1]], axis=1)
        edge_weights = np.mean(lens) / lens
    return arrays, active_ids, edges, edge_weights, filt


def _check_not_singular(a, lu, piv, active_ids, clusters):
    diag = np.abs(np.diag(lu))
    scale = max(np.max(np.abs(a)), 1e-300)
    bad = np.flatnonzero(diag <= SINGULARITY_RTOL * scale)
    if bad.size:
        node_local = int(bad[0]) // 6
        node = int(active_ids[node_local])
        raise SingularSystemError(
            f"normal matrix singular at unknown {int(bad[0])} "
            f"(node {node}, cluster {int(clusters[node])})"
        )


def gauss_newton_solve(
    graph, skin, correspondences, source_points, target_points, intrinsics, config=None
):
    """Run the fixed-iteration Gauss-Newton loop; returns motion plus tape."""
    config = config or SolverConfig()
    arrays, active_ids, edges, edge_weights, filt = _reduce_problem(
        graph, skin, correspondences, source_points, target_points, config
    )
    na = active_ids.size
    motion = GraphMotion.identity(na)
    tape = ForwardTape(
        nodes=graph.nodes[active_ids].copy(),
        edges=edges,
        edge_weights=edge_weights,
        arrays=arrays,
        intrinsics=intrinsics,
        config=config,
        active_node_ids=active_ids,
        n_nodes_full=graph.n_nodes,
        n_corr_full=len(correspondences),
    )
    residual_norms = []
    increments = []
    for _ in range(config.max_iter):
        system, inter = assemble_arrays(
            tape.nodes, edges, arrays,
            motion.rotations, motion.translations, intrinsics,
            config.lambda_2d, config.lambda_depth, config.lambda_reg,
            edge_weights,
        )
        a, b = system.normal_equations(config.damping)
        lu, piv = sla.lu_factor(a, check_finite=False)
        _check_not_singular(a, lu, piv, active_ids, graph.clusters)
        x = sla.lu_solve((lu, piv), b, check_finite=False)
        if not np.all(np.isfinite(x)):
            raise SolverDivergenceError("non-finite Gauss-Newton increment")
        tape.iterations.append(
            TapeIteration(
                rot=motion.rotations.copy(),
                trans=motion.translations.copy(),
                data_blocks=system.data_blocks,
                base_data_blocks=inter.base_data_blocks,
                r_data=system.r_data,
                r_data_unw=inter.r_data_unw,
                reg_blocks=system.reg_blocks,
                r_reg=system.r_reg,
                q=inter.q,
                wp=inter.wp,
                use2d=system.use2d,
                lu=(lu, piv),
                x=x,
            )
        )
        residual_norms.append(float(np.linalg.norm(system.residual_vector())))
        increments.append(x)
        step = x.reshape(na, 6)
        motion = apply_increment(motion, step[:, :3], step[:, 3:])

    full = GraphMotion.identity(graph.n_nodes)
    full.rotations[active_ids] = motion.rotations
    full.translations[active_ids] = motion.translations

    node_mask = np.zeros(graph.n_nodes, dtype=bool)
    node_mask[active_ids] = True
    corr_used = np.zeros(len(correspondences), dtype=bool)
    corr_used[arrays.corr_indices] = True
    return SolveResult(
        motion=full,
        residual_norms=residual_norms,
        increments=increments,
        usable_count=len(arrays),
        dropped_clusters=filt.dropped_clusters,
        node_mask=node_mask,
        corr_used_mask=corr_used,
        tape=tape,
    )


@dataclass
class TrackingMetrics:
    epe3d: float
    graph_error3d: float


def epe3d(motion, graph, skin, source_points, scene_flow, flow_mask):
    """Mean 3D end-point error of the dense warp against ground-truth flow."""
    warped = warp_cloud(source_points, graph, skin, motion)
    mask = warped.valid & np.asarray(flow_mask, dtype=bool)
    if not mask.any():
        return 0.0
    target = source_points.points + np.asarray(scene_flow, dtype=np.float64)
    err = np.linalg.norm(warped.points[mask] - target[mask], axis=1)
    return float(err.mean())


def graph_error3d(motion, gt_translations, node_mask=None):
    """Mean translation error over (active) nodes."""
    gt = np.asarray(gt_translations, dtype=np.float64)
    mask = (
        np.ones(gt.shape[0], dtype=bool)
        if node_mask is None
        else np.asarray(node_mask, dtype=bool)
    )
    if not mask.any():
        return 0.0
    err = np.linalg.norm(motion.translations[mask] - gt[mask], axis=1)
    return float(err.mean())


def evaluate_metrics(result, graph, skin, source_points, scene_flow, flow_mask, gt_translations):
    """EPE 3D over valid supported pixels and mean node translation error."""
    return TrackingMetrics(
        epe3d=epe3d(result.motion, graph, skin, source_points, scene_flow, flow_mask),
        graph_error3d=graph_error3d(result.motion, gt_translations, result.node_mask),
    )
