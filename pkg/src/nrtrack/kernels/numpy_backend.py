"""Pure-numpy fallbacks for the compiled kernels."""

import numpy as np


def accumulate_normal(blocks, anchors, resid, a_out, b_out):
    """Accumulate J^T J into a_out and -J^T r into b_out from block rows.

    blocks: (K, R, M, 6) Jacobian blocks, R residual rows per item, each
        touching up to M nodes with a 6-wide column block.
    anchors: (K, M) int32 node ids, negative = padding (block must be zero).
    resid: (K, R) residual values for the rows.
    a_out: (6N, 6N), b_out: (6N,), accumulated in place.
    """
    blocks = np.asarray(blocks, dtype=np.float64)
    anchors = np.asarray(anchors)
    resid = np.asarray(resid, dtype=np.float64)
    k, r, m, _ = blocks.shape
    n = b_out.shape[0] // 6
    safe = np.where(anchors < 0, 0, anchors)

    a4 = a_out.reshape(n, 6, n, 6)
    ablocks = np.zeros((n, n, 6, 6))
    for m1 in range(m):
        gb = np.einsum("krc,kr->kc", blocks[:, :, m1, :], resid)
        np.subtract.at(b_out.reshape(n, 6), safe[:, m1], gb)
        for m2 in range(m):
            contrib = np.einsum("krc,krd->kcd", blocks[:, :, m1, :], blocks[:, :, m2, :])
            np.add.at(ablocks, (safe[:, m1], safe[:, m2]), contrib)
    a4 += ablocks.transpose(0, 2, 1, 3)


def warp_points(points, anchors, weights, nodes, rot, trans):
    """Blend node rigid transforms over (P, 3) points with (P, M) support."""
    points = np.asarray(points, dtype=np.float64)
    anchors = np.asarray(anchors)
    weights = np.asarray(weights, dtype=np.float64)
    safe = np.where(anchors < 0, 0, anchors)
    w = np.where(anchors < 0, 0.0, weights)
    d = points[:, None, :] - nodes[safe]  # (P, M, 3)
    rotated = np.einsum("pmij,pmj->pmi", rot[safe], d)
    per_anchor = rotated + nodes[safe] + trans[safe]
    return np.einsum("pm,pmi->pi", w, per_anchor)
