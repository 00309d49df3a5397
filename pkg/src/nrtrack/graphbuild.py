"""Embedded deformation graph construction over a source depth frame.

Pipeline: triangle mesh over the depth map -> sigma-coverage node sampling
-> geodesic K-nearest-neighbor edges -> connected-component cluster labels
-> Gaussian skinning weights for every valid pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import cKDTree

from .errors import EmptyMeshError

SKIN_SUPPORT = 4  # nodes blended per pixel
SUPPORT_RADIUS_FACTOR = 2.0  # pixels farther than 2*sigma from all nodes are unsupported


@dataclass
class DepthMesh:
    """Triangle mesh over the valid pixels of a point image."""

    positions: np.ndarray  # (V, 3) vertex positions, meters
    pixel_ids: np.ndarray  # (V,) flat pixel index, row-major
    triangles: np.ndarray  # (T, 3) vertex indices
    width: int
    height: int

    @property
    def n_vertices(self):
        return self.positions.shape[0]

    def edge_list(self):
        """Unique undirected mesh edges as (E, 2) vertex index pairs."""
        if self.triangles.shape[0] == 0:
            return np.zeros((0, 2), dtype=np.int64)
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [0, 2]]], axis=0)
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)


@dataclass
class DeformationGraph:
    nodes: np.ndarray  # (N, 3) positions, meters
    edges: np.ndarray  # (N, K) int32 neighbor ids, -1 padding
    clusters: np.ndarray  # (N,) int32 component label
    sigma: float

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    def edge_pairs(self):
        """Directed edges as (E, 2) (i, j) pairs, row-major in i."""
        n, k = self.edges.shape
        src = np.repeat(np.arange(n), k)
        dst = self.edges.reshape(-1)
        keep = dst >= 0
        return np.stack([src[keep], dst[keep]], axis=1).astype(np.int64)

    @classmethod
    def build(cls, points, sigma=0.05, k_neighbors=8, edge_len_max=0.05):
        """Full construction pipeline from a source PointImage."""
        mesh = build_depth_mesh(points, edge_len_max)
        node_pos, node_vids = sample_nodes(mesh, sigma)
        edges = geodesic_edges(mesh, node_vids, k_neighbors)
        clusters = label_clusters(node_pos.shape[0], edges)
        return cls(node_pos, edges, clusters, float(sigma))


@dataclass
class SkinningTable:
    """Per-pixel blend support: up to SKIN_SUPPORT node ids and weights."""

    anchors: np.ndarray  # (H, W, M) int32, -1 padding / unsupported
    weights: np.ndarray  # (H, W, M) float64, sum to 1 for supported pixels

    def supported(self):
        return self.anchors[..., 0] >= 0


def build_depth_mesh(points, edge_len_max):
    """Two triangles per 2x2 pixel quad, dropped when a vertex is invalid or
    any triangle edge exceeds edge_len_max (cuts depth discontinuities)."""
    valid = points.valid
    h, w = valid.shape
    if int(valid.sum()) < 3:
        raise EmptyMeshError(f"need at least 3 valid pixels, got {int(valid.sum())}")

    vertex_id = np.full(h * w, -1, dtype=np.int64)
    pix = np.flatnonzero(valid.reshape(-1))
    vertex_id[pix] = np.arange(pix.size)
    positions = points.points.reshape(-1, 3)[pix]

    # Candidate quads: top-left corner (y, x) with x < w-1, y < h-1.
    ys, xs = np.meshgrid(np.arange(h - 1), np.arange(w - 1), indexing="ij")
    p00 = (ys * w + xs).reshape(-1)
    p10 = p00 + 1  # (y, x+1)
    p01 = p00 + w  # (y+1, x)
    p11 = p01 + 1

    pts = points.points.reshape(-1, 3)
    vflat = valid.reshape(-1)

    def edge_ok(a, b):
        ok = vflat[a] & vflat[b]
        d = np.linalg.norm(pts[a] - pts[b], axis=1)
        return ok & (d <= edge_len_max)

    e_top = edge_ok(p00, p10)
    e_left = edge_ok(p00, p01)
    e_right = edge_ok(p10, p11)
    e_bottom = edge_ok(p01, p11)
    e_diag = edge_ok(p10, p01)

    tris = []
    # Triangle A: (p00, p10, p01); Triangle B: (p10, p11, p01).
    ta = e_top & e_left & e_diag
    tb = e_right & e_bottom & e_diag
    if ta.any():
        tris.append(np.stack([p00[ta], p10[ta], p01[ta]], axis=1))
    if tb.any():
        tris.append(np.stack([p10[tb], p11[tb], p01[tb]], axis=1))
    if tris:
        tri_pix = np.concatenate(tris, axis=0)
        triangles = vertex_id[tri_pix]
    else:
        triangles = np.zeros((0, 3), dtype=np.int64)
    return DepthMesh(positions, pix, triangles, w, h)


def sample_nodes(mesh, sigma):
    """Greedy sigma-coverage sampling over mesh vertices in pixel-index order.

    A vertex becomes a node when it is farther than sigma from every node
    chosen so far; afterwards every vertex lies within sigma of some node.
    Deterministic: the lowest pixel index seeds the first node.
    """
    pos = mesh.positions
    v = pos.shape[0]
    order = np.argsort(mesh.pixel_ids, kind="stable")
    min_d = np.full(v, np.inf)
    node_ids = []
    for vi in order:
        if min_d[vi] > sigma:
            node_ids.append(vi)
            d = np.linalg.norm(pos - pos[vi], axis=1)
            np.minimum(min_d, d, out=min_d)
    node_ids = np.asarray(node_ids, dtype=np.int64)
    return pos[node_ids].copy(), node_ids


def geodesic_edges(mesh, node_vertex_ids, k_neighbors):
    """K geodesically nearest other nodes per node, as (N, K) ids (-1 pad).

    Geodesic distance is the shortest path along mesh edges weighted by
    Euclidean length; nodes in different mesh components never connect.
    """
    node_vertex_ids = np.asarray(node_vertex_ids, dtype=np.int64)
    n = node_vertex_ids.shape[0]
    out = np.full((n, k_neighbors), -1, dtype=np.int32)
    if n <= 1:
        return out
    edges = mesh.edge_list()
    if edges.shape[0] == 0:
        return out
    wts = np.linalg.norm(
        mesh.positions[edges[:, 0]] - mesh.positions[edges[:, 1]], axis=1
    )
    v = mesh.n_vertices
    adj = sparse.coo_matrix(
        (np.concatenate([wts, wts]),
         (np.concatenate([edges[:, 0], edges[:, 1]]),
          np.concatenate([edges[:, 1], edges[:, 0]]))),
        shape=(v, v),
    ).tocsr()
    dist = dijkstra(adj, directed=False, indices=node_vertex_ids)
    dnodes = dist[:, node_vertex_ids]  # (N, N)
    for i in range(n):
        d = dnodes[i].copy()
        d[i] = np.inf
        finite = np.flatnonzero(np.isfinite(d))
        if finite.size == 0:
            continue
        take = finite[np.lexsort((finite, d[finite]))][:k_neighbors]
        out[i, : take.size] = take.astype(np.int32)
    return out


def label_clusters(n_nodes, edges):
    """Connected-component labels over the undirected edge closure.

    Labels are dense from 0, ordered by first node occurrence.
    """
    edges = np.asarray(edges)
    if n_nodes == 0:
        return np.zeros(0, dtype=np.int32)
    src = np.repeat(np.arange(n_nodes), edges.shape[1] if edges.ndim == 2 else 0)
    dst = edges.reshape(-1) if edges.size else np.zeros(0, dtype=np.int64)
    keep = dst >= 0
    src, dst = src[keep], dst[keep]
    adj = sparse.coo_matrix(
        (np.ones(src.size), (src, dst)), shape=(n_nodes, n_nodes)
    )
    _, raw = connected_components(adj, directed=False)
    # Re-label by first occurrence for determinism.
    remap = {}
    labels = np.empty(n_nodes, dtype=np.int32)
    for i, lab in enumerate(raw):
        if lab not in remap:
            remap[lab] = len(remap)
        labels[i] = remap[lab]
    return labels


def compute_skinning(points, nodes, sigma):
    """Gaussian skinning weights over the SKIN_SUPPORT nearest nodes.

    Weight of node v for pixel point p is exp(-||v - p||^2 / (2 sigma^2)),
    normalized to sum 1. Pixels farther than 2*sigma from every node are
    marked unsupported (anchor -1, weight 0) and drop out of all residuals.
    """
    nodes = np.asarray(nodes, dtype=np.float64)
    h, w = points.valid.shape
    m = min(SKIN_SUPPORT, nodes.shape[0])
    anchors = np.full((h * w, SKIN_SUPPORT), -1, dtype=np.int32)
    weights = np.zeros((h * w, SKIN_SUPPORT))
    idx = np.flatnonzero(points.valid.reshape(-1))
    if idx.size and nodes.shape[0]:
        p = points.points.reshape(-1, 3)[idx]
        tree = cKDTree(nodes)
        d, nearest = tree.query(p, k=m)
        if m == 1:
            d = d[:, None]
            nearest = nearest[:, None]
        supported = d[:, 0] <= SUPPORT_RADIUS_FACTOR * sigma
        wts = np.exp(-(d**2) / (2.0 * sigma**2))
        wts /= wts.sum(axis=1, keepdims=True)
        sel = idx[supported]
        anchors[sel, :m] = nearest[supported].astype(np.int32)
        weights[sel, :m] = wts[supported]
    return SkinningTable(
        anchors.reshape(h, w, SKIN_SUPPORT), weights.reshape(h, w, SKIN_SUPPORT)
    )
