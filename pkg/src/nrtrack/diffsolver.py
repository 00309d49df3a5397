"""Reverse-mode differentiation through the unrolled Gauss-Newton solve.

Given the gradient of a scalar loss with respect to the final graph motion,
the backward pass walks the forward tape in reverse. Per iteration it
(1) back-propagates through the increment application, (2) applies the
analytic adjoint of the LU linear solve (reusing the stored factorization),
(3) maps the resulting matrix/vector gradients onto the Jacobian blocks and
residual rows, and (4) chains those through the hand-derived partials of
every row with respect to the correspondence locations, the importance
weights, and the incoming motion state. The full chain across all
iterations is kept; no last-iteration approximation.

Notation for the per-row partials matches the forward assembly: q_m is the
rotated node-relative offset R_a (p - v_a), wp the blended warped point, PJ
the projection Jacobian at wp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .energy import CorrespondenceSet
from .errors import SolverDivergenceError
from .geometry import bilinear_sample_many, project_jacobian_points
from .solver import gauss_newton_solve
from .warpfield import (
    exp_so3_many,
    hat,
    so3_right_jacobian_many,
    vee_contract,
    warp_cloud,
)


@dataclass
class MotionGrad:
    """Gradient of a scalar loss w.r.t. a GraphMotion.

    Rotation gradients are stored in matrix form (w.r.t. the 9 entries of
    each accumulated R); use from_rotation_tangent for a tangent-space
    (axis-angle delta at the current R) gradient.
    """

    d_rot: np.ndarray  # (N, 3, 3)
    d_trans: np.ndarray  # (N, 3)

    @classmethod
    def zeros(cls, n_nodes):
        return cls(np.zeros((n_nodes, 3, 3)), np.zeros((n_nodes, 3)))

    @classmethod
    def from_rotation_tangent(cls, d_eps, d_trans, rotations):
        """Matrix gradient G = 0.5 hat(d_eps) R, consistent with the tangent."""
        d_eps = np.asarray(d_eps, dtype=np.float64)
        n = d_eps.shape[0]
        d_rot = np.zeros((n, 3, 3))
        for i in range(n):
            d_rot[i] = 0.5 * hat(d_eps[i]) @ rotations[i]
        return cls(d_rot, np.asarray(d_trans, dtype=np.float64))

    def __add__(self, other):
        return MotionGrad(self.d_rot + other.d_rot, self.d_trans + other.d_trans)


@dataclass
class InputGradients:
    """Loss gradients w.r.t. the solver inputs, indexed like the input set."""

    d_target: np.ndarray  # (K, 2) d loss / d c_u
    d_weight: np.ndarray  # (K,) d loss / d w_u
    d_trans_final: np.ndarray  # (N, 3) seed gradient record (passthrough)


def linear_solve_backward(lu_piv, x, dl_dx):
    """Adjoint of x = A^{-1} b given the stored LU factorization of A.

    dl_db = A^{-T} dl_dx, dl_dA = -dl_db x^T.
    """
    dl_db = sla.lu_solve(lu_piv, np.asarray(dl_dx, dtype=np.float64), trans=1,
                         check_finite=False)
    dl_da = -np.outer(dl_db, x)
    return dl_da, dl_db


def _data_row_backward(it, arrays, nodes, intrinsics, lam2, lamd,
                       g_jdata, g_rdata, gw, gc, gt_acc, gr_acc):
    """Chain dL/dJ_data and dL/dr_data into (w, c, state) gradients."""
    k, _, m, _ = it.data_blocks.shape
    if k == 0:
        return
    anchors = arrays.anchors
    safe = np.where(anchors < 0, 0, anchors)
    alpha = np.where(anchors < 0, 0.0, arrays.alpha)
    w = arrays.w

    # Importance weight: every data row and block is linear in w.
    gw += np.einsum("kr,kr->k", it.r_data_unw, g_rdata)
    gw += np.einsum("krmc,krmc->k", it.base_data_blocks, g_jdata)

    # Correspondence location: r2 = lam2 w (uv - c), rd = lamd w (wp_z - z_t(c)).
    gr2 = g_rdata[:, :2]
    grd = g_rdata[:, 2]
    gc -= lam2 * w[:, None] * gr2
    gc -= (lamd * w * grd)[:, None] * arrays.dz_dc

    # Warped point: residual rows via PJ / e_z, blocks via the PJ dependence.
    pj, _ = project_jacobian_points(it.wp, intrinsics, valid=it.use2d)
    gwp = lam2 * w[:, None] * np.einsum("krc,kr->kc", pj, gr2)
    gwp[:, 2] += lamd * w * grd

    g2eps = g_jdata[:, :2, :, :3]
    g2t = g_jdata[:, :2, :, 3:]
    gdeps = g_jdata[:, 2, :, :3]
    skew = np.zeros((k, m, 3, 3))
    skew[:, :, 0, 1] = -it.q[..., 2]
    skew[:, :, 0, 2] = it.q[..., 1]
    skew[:, :, 1, 0] = it.q[..., 2]
    skew[:, :, 1, 2] = -it.q[..., 0]
    skew[:, :, 2, 0] = -it.q[..., 1]
    skew[:, :, 2, 1] = it.q[..., 0]

    # U = sum_m d<gJ, J>/d PJ: contraction target for the PJ(wp) dependence.
    term_eps = np.einsum("krmc,kmdc->krd", g2eps * alpha[:, None, :, None], skew)
    term_t = np.einsum("km,krmd->krd", alpha, g2t)
    u = lam2 * w[:, None, None] * (term_t - term_eps)
    fx, fy = intrinsics.fx, intrinsics.fy
    z = np.where(it.use2d, it.wp[:, 2], 1.0)
    xw, yw = it.wp[:, 0], it.wp[:, 1]
    live = it.use2d.astype(np.float64)
    gwp[:, 0] += live * (-fx / z**2) * u[:, 0, 2]
    gwp[:, 1] += live * (-fy / z**2) * u[:, 1, 2]
    gwp[:, 2] += live * (
        -fx / z**2 * u[:, 0, 0]
        - fy / z**2 * u[:, 1, 1]
        + 2 * fx * xw / z**3 * u[:, 0, 2]
        + 2 * fy * yw / z**3 * u[:, 1, 2]
    )

    # q_m = R_a (p - v_a): via wp, via the 2D eps block, via the depth eps block.
    gq = alpha[..., None] * gwp[:, None, :]
    pjt_g = np.einsum("krc,krmd->kmcd", pj, g2eps)
    gq -= (lam2 * w)[:, None, None] * alpha[..., None] * vee_contract(pjt_g)
    sd = (lamd * w)[:, None] * alpha
    gq[:, :, 0] -= sd * gdeps[:, :, 1]
    gq[:, :, 1] += sd * gdeps[:, :, 0]

    # Route into the assembly-time motion state.
    np.add.at(gt_acc, safe.reshape(-1),
              (alpha[..., None] * gwp[:, None, :]).reshape(-1, 3))
    d = arrays.p[:, None, :] - nodes[safe]
    np.add.at(gr_acc, safe.reshape(-1),
              np.einsum("kmc,kmd->kmcd", gq, d).reshape(-1, 3, 3))


def _reg_row_backward(it, edges, edge_weights, nodes, lam_reg,
                      g_jreg, g_rreg, gt_acc, gr_acc):
    e = edges.shape[0]
    if e == 0:
        return
    lamr = np.sqrt(lam_reg) * (
        np.ones(e) if edge_weights is None else np.sqrt(edge_weights)
    )
    greps = g_jreg.reshape(e, 3, 2, 6)[:, :, 0, :3]
    gqe = lamr[:, None] * g_rreg - lamr[:, None] * vee_contract(greps)
    np.add.at(gt_acc, edges[:, 0], lamr[:, None] * g_rreg)
    np.subtract.at(gt_acc, edges[:, 1], lamr[:, None] * g_rreg)
    dv = nodes[edges[:, 1]] - nodes[edges[:, 0]]
    np.add.at(gr_acc, edges[:, 0], np.einsum("ec,ed->ecd", gqe, dv))


def solver_backward(tape, motion_grad):
    """Back-propagate a final-motion gradient to correspondence inputs."""
    act = tape.active_node_ids
    na = act.size
    arrays = tape.arrays
    k = len(arrays)
    m = arrays.anchors.shape[1] if k else 0
    cfg = tape.config
    lam2 = np.sqrt(cfg.lambda_2d)
    lamd = np.sqrt(cfg.lambda_depth)

    g_rot = motion_grad.d_rot[act].copy()
    g_trans = motion_grad.d_trans[act].copy()
    gw = np.zeros(k)
    gc = np.zeros((k, 2))

    col_data = (6 * np.where(arrays.anchors < 0, 0, arrays.anchors))[:, :, None] \
        + np.arange(6)[None, None, :]
    col_data = col_data.reshape(k, 6 * m) if k else np.zeros((0, 0), dtype=np.int64)
    edges = tape.edges
    col_reg = (6 * edges)[:, :, None] + np.arange(6)[None, None, :]
    col_reg = col_reg.reshape(edges.shape[0], 12) if edges.shape[0] else \
        np.zeros((0, 12), dtype=np.int64)

    for it in reversed(tape.iterations):
        # Increment application: R' = exp(eps) R, t' = t + dt.
        step = it.x.reshape(na, 6)
        eps = step[:, :3]
        e_mat = exp_so3_many(eps)
        et_g = np.einsum("nji,njk->nik", e_mat, g_rot)
        tangent = vee_contract(np.einsum("nik,nlk->nil", et_g, it.rot))
        jr = so3_right_jacobian_many(eps)
        g_eps = np.einsum("nji,nj->ni", jr, tangent)
        g_x = np.concatenate([g_eps, g_trans], axis=1).reshape(-1)
        g_rot = et_g  # gradient w.r.t. pre-increment R; t passes through.

        # Linear solve adjoint and mapping onto J and r.
        _, g_b = linear_solve_backward(it.lu, it.x, g_x)
        g_b = np.asarray(g_b)
        s = -np.outer(g_b, it.x)
        s = s + s.T

        gt_acc = np.zeros((na, 3))
        gr_acc = np.zeros((na, 3, 3))
        if k:
            jflat = it.data_blocks.reshape(k, 3, 6 * m)
            s_g = s[col_data[:, :, None], col_data[:, None, :]]
            gb_g = g_b[col_data]
            g_jdata = np.einsum("krc,kcd->krd", jflat, s_g) \
                - np.einsum("kr,kd->krd", it.r_data, gb_g)
            g_rdata = -np.einsum("krc,kc->kr", jflat, gb_g)
            _data_row_backward(
                it, arrays, tape.nodes, tape.intrinsics, lam2, lamd,
                g_jdata.reshape(k, 3, m, 6), g_rdata, gw, gc, gt_acc, gr_acc,
            )
        if edges.shape[0]:
            jrflat = it.reg_blocks.reshape(-1, 3, 12)
            s_ge = s[col_reg[:, :, None], col_reg[:, None, :]]
            gb_e = g_b[col_reg]
            g_jreg = np.einsum("erc,ecd->erd", jrflat, s_ge) \
                - np.einsum("er,ed->erd", it.r_reg, gb_e)
            g_rreg = -np.einsum("erc,ec->er", jrflat, gb_e)
            _reg_row_backward(
                it, edges, tape.edge_weights, tape.nodes, cfg.lambda_reg,
                g_jreg, g_rreg, gt_acc, gr_acc,
            )
        g_rot += gr_acc
        g_trans = g_trans + gt_acc

    d_target = np.zeros((tape.n_corr_full, 2))
    d_weight = np.zeros(tape.n_corr_full)
    d_target[arrays.corr_indices] = gc
    d_weight[arrays.corr_indices] = gw
    return InputGradients(
        d_target=d_target,
        d_weight=d_weight,
        d_trans_final=motion_grad.d_trans.copy(),
    )


# ---------------------------------------------------------------------------
# Tracking losses
# ---------------------------------------------------------------------------

def loss_corr(pred, gt, mask, q=0.4, eps=0.01):
    """Robust q-norm correspondence loss sum((|dx| + |dy| + eps)^q).

    Returns (loss, gradient w.r.t. pred). The |.| subgradient at 0 is 0.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    diff = pred - gt
    l1 = np.abs(diff).sum(axis=-1)
    per = (l1 + eps) ** q
    loss = float(per[mask].sum())
    grad = q * (l1 + eps)[..., None] ** (q - 1.0) * np.sign(diff)
    grad[~mask] = 0.0
    return loss, grad


def downsample_half(field, mask, scale_values=True):
    """2x2 box downsample of a correspondence image; any invalid pixel in a
    block invalidates the block. Coordinate values are halved to stay in the
    coarser pixel grid."""
    h, w = mask.shape
    h2, w2 = h // 2, w // 2
    f = np.asarray(field, dtype=np.float64)[: 2 * h2, : 2 * w2]
    m = np.asarray(mask, dtype=bool)[: 2 * h2, : 2 * w2]
    blocks = f.reshape(h2, 2, w2, 2, -1)
    coarse = blocks.mean(axis=(1, 3))
    if scale_values:
        coarse = coarse * 0.5
    mcoarse = m.reshape(h2, 2, w2, 2).all(axis=(1, 3))
    return coarse, mcoarse


def loss_corr_two_level(pred_img, gt_img, mask_img, q=0.4, eps=0.01):
    """Correspondence loss at full and half resolution (coarse-to-fine).

    The half-resolution level uses bilinear (2x2 box) downsampling of both
    fields with any-invalid-invalidates masking; gradients chain back to the
    full-resolution prediction.
    """
    l0, g0 = loss_corr(pred_img, gt_img, mask_img, q, eps)
    pred1, m1a = downsample_half(pred_img, mask_img)
    gt1, m1b = downsample_half(gt_img, mask_img)
    m1 = m1a & m1b
    l1, g1 = loss_corr(pred1, gt1, m1, q, eps)
    grad = g0.copy()
    h2, w2 = m1.shape
    up = np.zeros_like(grad)
    # Each full-res pixel contributes 0.25 (box mean) * 0.5 (coordinate scale).
    up[: 2 * h2 : 2, : 2 * w2 : 2] = g1
    up[1 : 2 * h2 : 2, : 2 * w2 : 2] = g1
    up[: 2 * h2 : 2, 1 : 2 * w2 : 2] = g1
    up[1 : 2 * h2 : 2, 1 : 2 * w2 : 2] = g1
    grad += 0.125 * up
    return l0 + l1, grad


def loss_graph(motion, gt_translations, node_mask):
    """Squared l2 loss on node translations; rotations carry no gradient."""
    gt = np.asarray(gt_translations, dtype=np.float64)
    mask = np.asarray(node_mask, dtype=bool)
    diff = motion.translations - gt
    diff[~mask] = 0.0
    loss = float((diff**2).sum())
    grad = MotionGrad.zeros(motion.n_nodes)
    grad.d_trans[:] = 2.0 * diff
    return loss, grad


def loss_warp(source_points, graph, skin, motion, flow_target, flow_mask):
    """Squared l2 loss between the warped cloud and the flow-displaced cloud.

    flow_target is P_s + S_tilde as an (H, W, 3) array; the gradient chains
    through the warp into the supporting nodes' rotations and translations.
    """
    warped = warp_cloud(source_points, graph, skin, motion)
    mask = warped.valid & np.asarray(flow_mask, dtype=bool)
    target = np.asarray(flow_target, dtype=np.float64)
    diff = np.where(mask[..., None], warped.points - target, 0.0)
    loss = float((diff**2).sum())

    grad = MotionGrad.zeros(motion.n_nodes)
    idx = np.flatnonzero(mask.reshape(-1))
    if idx.size:
        g = 2.0 * diff.reshape(-1, 3)[idx]
        anchors = skin.anchors.reshape(-1, skin.anchors.shape[-1])[idx]
        alpha = skin.weights.reshape(-1, skin.weights.shape[-1])[idx]
        p = source_points.points.reshape(-1, 3)[idx]
        safe = np.where(anchors < 0, 0, anchors)
        alpha = np.where(anchors < 0, 0.0, alpha)
        np.add.at(grad.d_trans, safe.reshape(-1),
                  (alpha[..., None] * g[:, None, :]).reshape(-1, 3))
        d = p[:, None, :] - graph.nodes[safe]
        contrib = np.einsum("km,kc,kmd->kmcd", alpha, g, d)
        np.add.at(grad.d_rot, safe.reshape(-1), contrib.reshape(-1, 3, 3))
    return loss, grad


def loss_weight_supervised(weights, pred, gt, target_points,
                           inlier_dist=0.1, outlier_dist=0.3):
    """Binary cross-entropy against 3D-error labels (supervised baseline).

    Correspondences within inlier_dist of ground truth (3D, via bilinear
    target sampling) are labeled 1, beyond outlier_dist labeled 0, the band
    in between is ignored and receives no gradient.
    """
    weights = np.asarray(weights, dtype=np.float64)
    p_pred, v1 = bilinear_sample_many(target_points, pred)
    p_gt, v2 = bilinear_sample_many(target_points, gt)
    err = np.linalg.norm(p_pred - p_gt, axis=-1)
    usable = v1 & v2
    pos = usable & (err < inlier_dist)
    neg = usable & (err > outlier_dist)
    loss = 0.0
    grad = np.zeros_like(weights)
    wpos = np.clip(weights[pos], 1e-300, None)
    wneg = np.clip(1.0 - weights[neg], 1e-300, None)
    loss -= float(np.log(wpos).sum())
    loss -= float(np.log(wneg).sum())
    grad[pos] = -1.0 / wpos
    grad[neg] = 1.0 / wneg
    return loss, grad


# ---------------------------------------------------------------------------
# Self-supervised weight optimization and the gradient-check harness
# ---------------------------------------------------------------------------

def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def solve_and_loss(graph, skin, corr, source_points, target_points, intrinsics,
                   config, gt_translations, flow_target, flow_mask,
                   loss="graph+warp"):
    """Forward solve plus the selected tracking loss and its motion gradient."""
    result = gauss_newton_solve(
        graph, skin, corr, source_points, target_points, intrinsics, config
    )
    total = 0.0
    seed = MotionGrad.zeros(graph.n_nodes)
    if "graph" in loss:
        lg, gg = loss_graph(result.motion, gt_translations, result.node_mask)
        total += lg
        seed = seed + gg
    if "warp" in loss:
        lw, gw_ = loss_warp(source_points, graph, skin, result.motion,
                            flow_target, flow_mask)
        total += lw
        seed = seed + gw_
    return result, total, seed


@dataclass
class WeightOptResult:
    weights: np.ndarray  # (K,) final sigmoid weights
    logits: np.ndarray  # (K,)
    loss_curve: list
    steps_run: int


def optimize_weights(graph, skin, corr, source_points, target_points, intrinsics,
                     config, gt_translations, flow_target, flow_mask,
                     loss="graph+warp", steps=200, step_size=1.0,
                     init_logit=0.0, gt_corr_target=None):
    """Gradient descent on per-correspondence weight logits through the solver.

    weight = sigmoid(logit) keeps w in (0, 1). loss is one of "graph",
    "warp", "graph+warp" (through the solver backward) or "supervised"
    (direct binary cross-entropy, requires gt_corr_target).
    """
    work = corr.copy()
    logits = np.full(len(corr), float(init_logit))
    curve = []
    for step in range(steps):
        w = _sigmoid(logits)
        work.weight = w
        if loss == "supervised":
            if gt_corr_target is None:
                raise ValueError("supervised loss requires gt_corr_target")
            lval, gw = loss_weight_supervised(
                w, work.target, gt_corr_target, target_points
            )
            gw[~work.valid] = 0.0
        else:
            try:
                result, lval, seed = solve_and_loss(
                    graph, skin, work, source_points, target_points, intrinsics,
                    config, gt_translations, flow_target, flow_mask, loss,
                )
            except SolverDivergenceError as exc:
                raise SolverDivergenceError(
                    f"inner solve diverged at weight-optimization step {step}: {exc}"
                ) from exc
            grads = solver_backward(result.tape, seed)
            gw = grads.d_weight
        logits = logits - step_size * gw * w * (1.0 - w)
        curve.append(float(lval))
    w = _sigmoid(logits)
    return WeightOptResult(weights=w, logits=logits, loss_curve=curve,
                           steps_run=steps)


def gradient_check(graph, skin, corr, source_points, target_points, intrinsics,
                   config, gt_translations, flow_target, flow_mask,
                   eps_w=1e-4, eps_c=1e-3, loss="graph+warp",
                   max_params=None, seed=0):
    """Central finite differences of the full solve+loss pipeline against the
    analytic backward gradients. Returns a JSON-friendly report.

    Correspondence coordinates where the pipeline is not differentiable are
    skipped and counted: locations within 2*eps_c of a pixel grid line (the
    bilinear interpolant is kinked there and a straddling difference
    quotient measures no derivative) and locations where the +-eps_c probe
    flips the target-sample validity (the loss jumps there).
    """
    from .geometry import sample_z_with_grad

    result, _, seed_grad = solve_and_loss(
        graph, skin, corr, source_points, target_points, intrinsics, config,
        gt_translations, flow_target, flow_mask, loss,
    )
    grads = solver_backward(result.tape, seed_grad)

    def pipeline(c):
        _, lval, _ = solve_and_loss(
            graph, skin, c, source_points, target_points, intrinsics, config,
            gt_translations, flow_target, flow_mask, loss,
        )
        return lval

    used = np.flatnonzero(result.corr_used_mask)
    if max_params is not None and used.size > max_params:
        rng = np.random.default_rng(seed)
        used = np.sort(rng.choice(used, size=max_params, replace=False))

    def rel_err(a, f):
        denom = max(abs(a), abs(f))
        if denom < 1e-12:
            return 0.0
        return abs(a - f) / denom

    def fd_is_valid(k, axis):
        c = corr.target[k]
        if abs(c[axis] - round(c[axis])) <= 2 * eps_c:
            return False
        probes = np.repeat(c[None, :], 2, axis=0)
        probes[0, axis] += eps_c
        probes[1, axis] -= eps_c
        _, _, ok_base = sample_z_with_grad(target_points, c[None, :])
        _, _, ok = sample_z_with_grad(target_points, probes)
        return bool(ok[0] == ok_base[0] and ok[1] == ok_base[0])

    entries = []
    n_skipped = 0
    for k in used:
        probe = corr.copy()
        probe.weight[k] = corr.weight[k] + eps_w
        lp = pipeline(probe)
        probe.weight[k] = corr.weight[k] - eps_w
        lm = pipeline(probe)
        fd = (lp - lm) / (2 * eps_w)
        a = grads.d_weight[k]
        entries.append({"index": int(k), "kind": "weight",
                        "analytic": float(a), "fd": float(fd),
                        "rel_err": rel_err(a, fd)})
        for axis in range(2):
            if not fd_is_valid(k, axis):
                n_skipped += 1
                continue
            probe = corr.copy()
            probe.target[k, axis] = corr.target[k, axis] + eps_c
            lp = pipeline(probe)
            probe.target[k, axis] = corr.target[k, axis] - eps_c
            lm = pipeline(probe)
            fd = (lp - lm) / (2 * eps_c)
            a = grads.d_target[k, axis]
            entries.append({"index": int(k), "kind": f"corr_{'xy'[axis]}",
                            "analytic": float(a), "fd": float(fd),
                            "rel_err": rel_err(a, fd)})
    errs = np.array([e["rel_err"] for e in entries]) if entries else np.zeros(1)
    werrs = np.array([e["rel_err"] for e in entries if e["kind"] == "weight"]) \
        if entries else np.zeros(1)
    cerrs = np.array([e["rel_err"] for e in entries if e["kind"] != "weight"]) \
        if entries else np.zeros(1)
    report = {
        "n_params": len(entries),
        "n_skipped_nondifferentiable": n_skipped,
        "eps_w": eps_w,
        "eps_c": eps_c,
        "max_rel_err": float(errs.max()),
        "p99_rel_err": float(np.percentile(errs, 99)),
        "p99_rel_err_weight": float(np.percentile(werrs, 99)) if werrs.size else 0.0,
        "p99_rel_err_corr": float(np.percentile(cerrs, 99)) if cerrs.size else 0.0,
        "entries": entries,
    }
    return report
