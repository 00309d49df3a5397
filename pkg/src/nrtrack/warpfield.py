"""Rotation parameterization and the embedded-deformation warp operator.

Node rotations are stored as accumulated 3x3 matrices; each solver iteration
optimizes a small axis-angle delta applied on the left (epsilon-decomposition),
which keeps the rotation derivative formulas exact at the evaluation point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InvalidInputError, SolverDivergenceError, UnsupportedPointError
from .geometry import PointImage

SMALL_ANGLE = 1e-8
REORTHO_EVERY = 10


def hat(w):
    """Skew-symmetric matrix of a 3-vector: hat(w) @ x == cross(w, x)."""
    w = np.asarray(w, dtype=np.float64)
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


def hat_many(ws):
    """Vectorized hat operator for (..., 3) input."""
    ws = np.asarray(ws, dtype=np.float64)
    out = np.zeros(ws.shape[:-1] + (3, 3))
    out[..., 0, 1] = -ws[..., 2]
    out[..., 0, 2] = ws[..., 1]
    out[..., 1, 0] = ws[..., 2]
    out[..., 1, 2] = -ws[..., 0]
    out[..., 2, 0] = -ws[..., 1]
    out[..., 2, 1] = ws[..., 0]
    return out


def vee_contract(m):
    """Adjoint of hat under the Frobenius inner product.

    Returns v with <M, hat(x)> = v . x for all x, i.e. twice the
    skew-symmetric part of M stacked as a vector.
    """
    m = np.asarray(m, dtype=np.float64)
    return np.stack(
        [
            m[..., 2, 1] - m[..., 1, 2],
            m[..., 0, 2] - m[..., 2, 0],
            m[..., 1, 0] - m[..., 0, 1],
        ],
        axis=-1,
    )


def exp_so3(w):
    """Rodrigues exponential map; Taylor branch below SMALL_ANGLE."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    k = hat(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * (k @ k)


def exp_so3_many(ws):
    """Vectorized exponential map for (N, 3) input."""
    ws = np.asarray(ws, dtype=np.float64)
    theta = np.linalg.norm(ws, axis=-1)
    small = theta < SMALL_ANGLE
    tsafe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(tsafe) / tsafe)
    b = np.where(small, 0.5, (1.0 - np.cos(tsafe)) / tsafe**2)
    k = hat_many(ws)
    kk = np.einsum("...ij,...jk->...ik", k, k)
    return np.eye(3) + a[..., None, None] * k + b[..., None, None] * kk


def so3_right_jacobian(w):
    """Right Jacobian of SO(3): exp(w + d) ~= exp(w) exp(Jr(w) d)."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    k = hat(w)
    if theta < 1e-4:
        c2 = 0.5 - theta**2 / 24.0
        c3 = 1.0 / 6.0 - theta**2 / 120.0
    else:
        c2 = (1.0 - np.cos(theta)) / theta**2
        c3 = (theta - np.sin(theta)) / theta**3
    return np.eye(3) - c2 * k + c3 * (k @ k)


def so3_right_jacobian_many(ws):
    ws = np.asarray(ws, dtype=np.float64)
    theta = np.linalg.norm(ws, axis=-1)
    small = theta < 1e-4
    tsafe = np.where(small, 1.0, theta)
    c2 = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(tsafe)) / tsafe**2)
    c3 = np.where(
        small, 1.0 / 6.0 - theta**2 / 120.0, (tsafe - np.sin(tsafe)) / tsafe**3
    )
    k = hat_many(ws)
    kk = np.einsum("...ij,...jk->...ik", k, k)
    return np.eye(3) - c2[..., None, None] * k + c3[..., None, None] * kk


@dataclass
class GraphMotion:
    """Per-node motion state: accumulated rotation, translation, pending delta.

    ``omega`` holds the pending axis-angle delta of the epsilon-decomposition;
    it is zero at every public boundary and is reset by apply_increment.
    """

    rotations: np.ndarray  # (N, 3, 3)
    translations: np.ndarray  # (N, 3)
    omega: np.ndarray = None  # (N, 3) pending delta
    increments_applied: int = 0

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.translations = np.asarray(self.translations, dtype=np.float64)
        if self.omega is None:
            self.omega = np.zeros_like(self.translations)
        else:
            self.omega = np.asarray(self.omega, dtype=np.float64)

    @classmethod
    def identity(cls, n_nodes):
        return cls(
            np.broadcast_to(np.eye(3), (n_nodes, 3, 3)).copy(),
            np.zeros((n_nodes, 3)),
        )

    @property
    def n_nodes(self):
        return self.translations.shape[0]

    def copy(self):
        return GraphMotion(
            self.rotations.copy(),
            self.translations.copy(),
            self.omega.copy(),
            self.increments_applied,
        )

    def effective_rotations(self):
        """exp(omega) R per node; equals R whenever omega is zero."""
        if not self.omega.any():
            return self.rotations
        return np.einsum(
            "nij,njk->nik", exp_so3_many(self.omega), self.rotations
        )

    def orthonormality_drift(self):
        """max over nodes of ||R^T R - I||_F."""
        rtr = np.einsum("nji,njk->nik", self.rotations, self.rotations)
        return float(np.max(np.linalg.norm(rtr - np.eye(3), axis=(1, 2))))


def warp_point(p, nodes, anchors, weights, motion):
    """Blend the supporting nodes' rigid transforms applied to point ``p``.

    anchors/weights are the point's skinning support (negative anchor ids are
    padding). Raises UnsupportedPointError when no support exists.
    """
    p = np.asarray(p, dtype=np.float64)
    anchors = np.asarray(anchors)
    weights = np.asarray(weights, dtype=np.float64)
    live = anchors >= 0
    if not live.any():
        raise UnsupportedPointError("point has no supporting graph node")
    rot = motion.effective_rotations()
    out = np.zeros(3)
    for a, w in zip(anchors[live], weights[live]):
        out += w * (rot[a] @ (p - nodes[a]) + nodes[a] + motion.translations[a])
    return out


def warp_points(points, nodes, anchors, weights, motion):
    """Vectorized warp of (P, 3) points with (P, M) skinning support."""
    rot = motion.effective_rotations()
    return kernels.warp_points(
        np.ascontiguousarray(points, dtype=np.float64),
        np.ascontiguousarray(anchors, dtype=np.int32),
        np.ascontiguousarray(weights, dtype=np.float64),
        np.ascontiguousarray(nodes, dtype=np.float64),
        np.ascontiguousarray(rot, dtype=np.float64),
        np.ascontiguousarray(motion.translations, dtype=np.float64),
    )


def warp_cloud(points, graph, skin, motion):
    """Element-wise warp of a PointImage; unsupported pixels become invalid."""
    h, w = points.valid.shape
    anchors = skin.anchors.reshape(-1, skin.anchors.shape[-1])
    weights = skin.weights.reshape(-1, skin.weights.shape[-1])
    supported = anchors[:, 0] >= 0
    mask = points.valid.reshape(-1) & supported
    out = np.zeros((h * w, 3))
    idx = np.flatnonzero(mask)
    if idx.size:
        out[idx] = warp_points(
            points.points.reshape(-1, 3)[idx],
            graph.nodes,
            anchors[idx],
            weights[idx],
            motion,
        )
    return PointImage(out.reshape(h, w, 3), mask.reshape(h, w))


def apply_increment(motion, eps, dt):
    """Left-multiply per-node rotation deltas and add translation deltas.

    Resets the pending omega to zero. Re-orthonormalizes the accumulated
    rotations every REORTHO_EVERY increments to bound drift.
    """
    eps = np.asarray(eps, dtype=np.float64)
    dt = np.asarray(dt, dtype=np.float64)
    if not (np.all(np.isfinite(eps)) and np.all(np.isfinite(dt))):
        raise SolverDivergenceError("non-finite solver increment")
    if eps.shape != (motion.n_nodes, 3) or dt.shape != (motion.n_nodes, 3):
        raise InvalidInputError("increment shape mismatch")
    rot = np.einsum("nij,njk->nik", exp_so3_many(eps), motion.rotations)
    count = motion.increments_applied + 1
    if count % REORTHO_EVERY == 0:
        u, _, vt = np.linalg.svd(rot)
        rot = np.einsum("nij,njk->nik", u, vt)
        det = np.linalg.det(rot)
        # svd-based polar projection can flip orientation only for degenerate
        # inputs; restore det = +1 defensively.
        flip = det < 0
        if flip.any():
            u[flip, :, 2] *= -1.0
            rot = np.einsum("nij,njk->nik", u, vt)
    return GraphMotion(
        rot,
        motion.translations + dt,
        np.zeros_like(dt),
        count,
    )


def rigid_node_motion(nodes, rotation, translation):
    """GraphMotion equivalent to one global rigid transform G(p) = R p + t.

    Every node gets G's rotation about its own position plus the induced
    translation, so the blended warp reproduces G exactly.
    """
    nodes = np.asarray(nodes, dtype=np.float64)
    n = nodes.shape[0]
    rot = np.broadcast_to(np.asarray(rotation, dtype=np.float64), (n, 3, 3)).copy()
    trans = (nodes @ np.asarray(rotation).T + np.asarray(translation)) - nodes
    return GraphMotion(rot, trans)
