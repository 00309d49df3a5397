"""Deterministic synthetic scenes: frames, ground-truth motion, scene flow,
exact correspondences, masks, and outlier/noise injection.

A scene is an analytic surface (plane or cylinder section) seen by a pinhole
camera, deformed by one of four families: a global rigid motion, an
articulated bend about a hinge line, a smooth sine displacement field, or
two independently rigid patches. Ground truth comes from the closed forms;
the target depth image is rendered by splatting a 2x supersampled deformed
surface with z-buffering, then refining every covered pixel to the exact
ray-surface depth by Newton iteration on the surface parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .energy import CorrespondenceSet
from .errors import GenerationError
from .geometry import (
    CameraIntrinsics,
    DepthImage,
    PointImage,
    bilinear_sample_many,
    point_image_from_depth,
    project_points,
)
from .graphbuild import DeformationGraph, compute_skinning
from .warpfield import GraphMotion, exp_so3

KINDS = ("rigid", "articulated_bend", "smooth_sine", "two_cluster")

PLANE_DEPTH = 1.2  # meters
MARGIN = 0.12  # foreground margin, fraction of image size
OUTLIER_MIN_3D = 0.1  # meters; injected outliers must be at least this wrong


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _rot_about_axis(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    return exp_so3(axis / np.linalg.norm(axis) * angle)


@dataclass
class _Deformation:
    """Closed-form deformation with per-point local rotation."""

    fn: callable  # (..., 3) -> (..., 3)
    local_rotation: callable  # (3,) point -> (3, 3)
    inverse: callable | None = None


def _make_rigid(rotation, translation, pivot):
    def fn(p):
        return (np.asarray(p, dtype=np.float64) - pivot) @ rotation.T + pivot + translation

    def inv(p):
        return (np.asarray(p, dtype=np.float64) - pivot - translation) @ rotation + pivot

    return _Deformation(fn, lambda v: rotation, inv)


def _make_bend(hinge_x, band, angle, hinge_point, axis):
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)

    def theta(x):
        return angle * _smoothstep((x - hinge_x) / band)

    def fn(p):
        p2 = np.atleast_2d(np.asarray(p, dtype=np.float64))
        th = theta(p2[:, 0])
        d = p2 - hinge_point
        cos_t = np.cos(th)[:, None]
        sin_t = np.sin(th)[:, None]
        kxd = np.cross(np.broadcast_to(k, d.shape), d)
        kdotd = d @ k
        out = d * cos_t + kxd * sin_t + np.outer(kdotd * (1 - cos_t[:, 0]), k)
        return (out + hinge_point).reshape(np.shape(p))

    def local(v):
        return _rot_about_axis(k, float(theta(np.asarray(v)[0])))

    return _Deformation(fn, local)


def _make_sine(amplitude, wavelength, phase, x_ref):
    direction = np.array([0.0, 0.0, 1.0])

    def fn(p):
        p2 = np.atleast_2d(np.asarray(p, dtype=np.float64))
        disp = amplitude * np.sin(2 * np.pi * (p2[:, 0] - x_ref) / wavelength + phase)
        return (p2 + disp[:, None] * direction).reshape(np.shape(p))

    return _Deformation(fn, lambda v: np.eye(3))


def _make_two_cluster(split_x, left, right):
    def fn(p):
        p2 = np.atleast_2d(np.asarray(p, dtype=np.float64))
        out = np.where((p2[:, 0] < split_x)[:, None], left.fn(p2), right.fn(p2))
        return out.reshape(np.shape(p))

    def local(v):
        return left.local_rotation(v) if v[0] < split_x else right.local_rotation(v)

    return _Deformation(fn, local)


def _surface_points(depth_fn, intr, params):
    params = np.asarray(params, dtype=np.float64)
    d = depth_fn(params)
    out = np.empty(params.shape[:-1] + (3,))
    out[..., 0] = (params[..., 0] - intr.cx) * d / intr.fx
    out[..., 1] = (params[..., 1] - intr.cy) * d / intr.fy
    out[..., 2] = d
    return out


def _project_params(depth_fn, deform, intr, params):
    pts = deform.fn(_surface_points(depth_fn, intr, params))
    uv, ok = project_points(pts, intr)
    return uv, pts, ok


def _newton_refine(depth_fn, deform, intr, params, targets,
                   tol=1e-10, max_iter=20, h=1e-5):
    """Solve project(deform(surface(params))) == targets per row.

    Returns (params, converged). The 2x2 parameter Jacobians come from
    central differences of the smooth composite map.
    """
    params = np.array(params, dtype=np.float64)
    n = params.shape[0]
    alive = np.ones(n, dtype=bool)
    for _ in range(max_iter):
        uv, _, okp = _project_params(depth_fn, deform, intr, params)
        err = np.abs(uv - targets).max(axis=1)
        active = alive & okp & (err > tol)
        if not active.any():
            break
        pa = params[active]
        jac = np.empty((pa.shape[0], 2, 2))
        for axis in range(2):
            dp = np.zeros_like(pa)
            dp[:, axis] = h
            up, _, _ = _project_params(depth_fn, deform, intr, pa + dp)
            um, _, _ = _project_params(depth_fn, deform, intr, pa - dp)
            jac[:, :, axis] = (up - um) / (2 * h)
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        good = np.abs(det) > 1e-12
        det = np.where(good, det, 1.0)
        r = uv[active] - targets[active]
        dx = (jac[:, 1, 1] * r[:, 0] - jac[:, 0, 1] * r[:, 1]) / det
        dy = (-jac[:, 1, 0] * r[:, 0] + jac[:, 0, 0] * r[:, 1]) / det
        step = np.stack([dx, dy], axis=1)
        step[~good] = 0.0
        params[active] -= step
        alive[np.flatnonzero(active)[~good]] = False
    uv, pts, _ = _project_params(depth_fn, deform, intr, params)
    conv = alive & (np.abs(uv - targets).max(axis=1) <= 1e-6) & (pts[..., 2] > 0)
    return params, conv


@dataclass
class SyntheticScene:
    kind: str
    seed: int
    intrinsics: CameraIntrinsics
    source_depth: DepthImage
    source_points: PointImage
    target_depth: DepthImage
    target_points: PointImage
    graph: DeformationGraph
    skin: object
    gt_motion: GraphMotion
    scene_flow: np.ndarray  # (H, W, 3)
    corr: CorrespondenceSet  # exact correspondences, valid = mask_corr
    mask_corr: np.ndarray  # (H, W) bool
    mask_flow: np.ndarray  # (H, W) bool
    mask_nodes: np.ndarray  # (N,) bool
    deform: _Deformation = field(repr=False, default=None)
    surface_depth: callable = field(repr=False, default=None)
    target_param_map: np.ndarray = field(repr=False, default=None)

    @property
    def resolution(self):
        return (self.source_depth.width, self.source_depth.height)

    def flow_target(self):
        """P_s + S_tilde, the warp-loss target."""
        return self.source_points.points + self.scene_flow

    def target_depth_at(self, locs, init_params=None):
        """Exact deformed-surface depth along the rays of continuous target
        locations (Newton on the surface parameters).

        Returns (depth (...), valid (...)). init_params defaults to the
        refined parameters of the nearest rendered target pixel.
        """
        locs = np.atleast_2d(np.asarray(locs, dtype=np.float64))
        n = locs.shape[0]
        if init_params is None:
            h, w = self.target_depth.depth.shape
            px = np.clip(np.round(locs[:, 0]).astype(int), 0, w - 1)
            py = np.clip(np.round(locs[:, 1]).astype(int), 0, h - 1)
            init_params = self.target_param_map[py, px]
        params = np.array(init_params, dtype=np.float64).reshape(n, 2)
        ok = np.all(np.isfinite(params), axis=1)
        params[~ok] = 0.0
        params, conv = _newton_refine(
            self.surface_depth, self.deform, self.intrinsics, params, locs
        )
        ok &= conv
        depth = np.zeros(n)
        if ok.any():
            _, pts, _ = _project_params(
                self.surface_depth, self.deform, self.intrinsics, params[ok]
            )
            depth[ok] = pts[:, 2]
        return depth, ok


def _scene_layout(width, height, kind):
    """Foreground pixel boxes and the shared camera."""
    fx = 1.5 * width
    intr = CameraIntrinsics(fx, fx, (width - 1) / 2.0, (height - 1) / 2.0)
    mx = int(round(MARGIN * width))
    my = int(round(MARGIN * height))
    if kind == "two_cluster":
        gap = max(int(round(0.2 * width)), 6)
        wbox = (width - 2 * mx - gap) // 2
        boxes = [
            (mx, mx + wbox, my, height - my),
            (width - mx - wbox, width - mx, my, height - my),
        ]
    else:
        boxes = [(mx, width - mx, my, height - my)]
    return intr, boxes


def _surface_fn(kind, intr, width):
    """Depth as a function of continuous pixel coordinates."""
    z0 = PLANE_DEPTH
    if kind == "smooth_sine":
        # Cylinder section bowing toward the camera: mild curvature, still
        # well conditioned for the depth term.
        radius = 3.0
        x_mid = (width - 1) / 2.0
        xm = (x_mid - intr.cx) / intr.fx * z0
        zc = z0 + radius

        def depth(params):
            params = np.asarray(params, dtype=np.float64)
            a = (params[..., 0] - intr.cx) / intr.fx
            aa = a**2 + 1.0
            bb = -2.0 * (a * xm + zc)
            cc = xm**2 + zc**2 - radius**2
            disc = np.maximum(bb**2 - 4 * aa * cc, 0.0)
            return (-bb - np.sqrt(disc)) / (2 * aa)

        return depth
    return lambda params: np.full(np.asarray(params).shape[:-1], z0, dtype=np.float64)


def _make_deformation(kind, rng, fg_points):
    center = fg_points.mean(axis=0)
    x_min, x_max = fg_points[:, 0].min(), fg_points[:, 0].max()
    if kind == "rigid":
        axis = rng.normal(size=3)
        angle = rng.uniform(0.005, 0.02)
        trans = rng.uniform(-0.035, 0.035, size=3)
        trans[2] = rng.uniform(0.01, 0.03) * rng.choice([-1.0, 1.0])
        return _make_rigid(_rot_about_axis(axis, angle), trans, center)
    if kind == "articulated_bend":
        span = x_max - x_min
        hinge_x = x_min + 0.25 * span
        band = 0.7 * span
        angle = rng.uniform(0.15, 0.28)
        hinge_point = np.array([hinge_x, center[1], PLANE_DEPTH])
        return _make_bend(hinge_x, band, angle, hinge_point, np.array([0.0, 1.0, 0.0]))
    if kind == "smooth_sine":
        amp = rng.uniform(0.004, 0.007)
        wavelength = rng.uniform(0.6, 0.8)
        phase = rng.uniform(0, 2 * np.pi)
        return _make_sine(amp, wavelength, phase, x_min)
    if kind == "two_cluster":
        split = 0.5 * (x_min + x_max)
        parts = []
        for sign in (-1.0, 1.0):
            axis = rng.normal(size=3)
            angle = rng.uniform(0.005, 0.02)
            trans = rng.uniform(-0.03, 0.03, size=3)
            trans[0] += sign * 0.015
            pivot = center + np.array([sign * 0.12, 0.0, 0.0])
            parts.append(_make_rigid(_rot_about_axis(axis, angle), trans, pivot))
        return _make_two_cluster(split, parts[0], parts[1])
    raise GenerationError(f"unknown scene kind {kind!r}")


def _render_target(depth_fn, deform, intr, boxes, width, height):
    """Splat the 2x supersampled deformed surface, z-buffer, box-downsample
    for coverage, then refine covered pixels to exact pixel-center depths."""
    params = []
    for (x0, x1, y0, y1) in boxes:
        us = np.arange(x0, x1 - 0.25, 0.5)
        vs = np.arange(y0, y1 - 0.25, 0.5)
        gx, gy = np.meshgrid(us, vs)
        params.append(np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1))
    params = np.concatenate(params, axis=0)

    uv, deformed, okp = _project_params(depth_fn, deform, intr, params)

    w2, h2 = 2 * width, 2 * height
    sx = np.round(uv[:, 0] * 2).astype(np.int64)
    sy = np.round(uv[:, 1] * 2).astype(np.int64)
    ok = okp & (sx >= 0) & (sx < w2) & (sy >= 0) & (sy < h2)
    zbuf = np.full((h2, w2), np.inf)
    pbuf = np.full((h2, w2, 2), np.nan)
    order = np.argsort(-deformed[:, 2], kind="stable")  # far-to-near; near wins
    oi = order[ok[order]]
    zbuf[sy[oi], sx[oi]] = deformed[oi, 2]
    pbuf[sy[oi], sx[oi]] = params[oi]

    covered = np.isfinite(zbuf).reshape(height, 2, width, 2).all(axis=(1, 3))
    init_p = pbuf.reshape(height, 2, width, 2, 2)[:, 0, :, 0, :]

    depth = np.zeros((height, width))
    param_map = np.full((height, width, 2), np.nan)
    idx = np.flatnonzero(covered.reshape(-1))
    if idx.size:
        py, px = np.divmod(idx, width)
        targets = np.stack([px, py], axis=1).astype(np.float64)
        pinit = init_p.reshape(-1, 2)[idx].copy()
        bad = ~np.isfinite(pinit).all(axis=1)
        pinit[bad] = targets[bad]
        refined, conv = _newton_refine(depth_fn, deform, intr, pinit, targets)
        inside = np.zeros(refined.shape[0], dtype=bool)
        for (x0, x1, y0, y1) in boxes:
            inside |= (
                (refined[:, 0] >= x0 - 0.5) & (refined[:, 0] <= x1 - 0.5)
                & (refined[:, 1] >= y0 - 0.5) & (refined[:, 1] <= y1 - 0.5)
            )
        good = conv & inside
        if good.any():
            _, pts, _ = _project_params(depth_fn, deform, intr, refined[good])
            depth.reshape(-1)[idx[good]] = pts[:, 2]
            param_map.reshape(-1, 2)[idx[good]] = refined[good]
    return DepthImage.from_depth(depth), param_map


def generate_scene(kind, resolution=(96, 72), seed=0, sigma=0.05,
                   k_neighbors=8, edge_len_max=0.05):
    """Build a complete synthetic scene; bit-identical for identical inputs."""
    if kind not in KINDS:
        raise GenerationError(f"unknown scene kind {kind!r}")
    width, height = int(resolution[0]), int(resolution[1])
    if width < 16 or height < 16:
        raise GenerationError(f"resolution must be at least 16x16, got {width}x{height}")
    rng = np.random.default_rng(seed)
    intr, boxes = _scene_layout(width, height, kind)
    depth_fn = _surface_fn(kind, intr, width)

    fg = np.zeros((height, width), dtype=bool)
    for (x0, x1, y0, y1) in boxes:
        fg[y0:y1, x0:x1] = True
    gx, gy = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    params_grid = np.stack([gx, gy], axis=-1)
    depth_src = np.where(fg, depth_fn(params_grid), 0.0)
    source_depth = DepthImage.from_depth(depth_src)
    source_points = point_image_from_depth(source_depth, intr)

    deform = _make_deformation(kind, rng, source_points.points[fg])

    graph = DeformationGraph.build(source_points, sigma, k_neighbors, edge_len_max)
    skin = compute_skinning(source_points, graph.nodes, sigma)

    n = graph.n_nodes
    gt_rot = np.empty((n, 3, 3))
    for i in range(n):
        gt_rot[i] = deform.local_rotation(graph.nodes[i])
    gt_trans = deform.fn(graph.nodes) - graph.nodes
    gt_motion = GraphMotion(gt_rot, gt_trans)

    flow = np.zeros((height, width, 3))
    pts_flat = source_points.points[fg]
    flow[fg] = deform.fn(pts_flat) - pts_flat
    deformed_px = pts_flat + flow[fg]
    c_exact, ok_proj = project_points(deformed_px, intr)

    target_depth, param_map = _render_target(depth_fn, deform, intr, boxes, width, height)
    target_points = point_image_from_depth(target_depth, intr)

    inb = (
        (c_exact[:, 0] >= 0) & (c_exact[:, 0] <= width - 1)
        & (c_exact[:, 1] >= 0) & (c_exact[:, 1] <= height - 1)
    )
    sample, ok_sample = bilinear_sample_many(target_points, c_exact)
    visible = ok_sample & (deformed_px[:, 2] <= sample[:, 2] + 2e-3)

    mask_c = ok_proj & inb & visible
    ys, xs = np.nonzero(fg)
    corr = CorrespondenceSet(
        source_px=np.stack([xs, ys], axis=1).astype(np.int32),
        target=c_exact,
        weight=np.ones(xs.size),
        valid=mask_c,
    )
    mask_corr = np.zeros((height, width), dtype=bool)
    mask_corr[ys, xs] = mask_c

    return SyntheticScene(
        kind=kind,
        seed=seed,
        intrinsics=intr,
        source_depth=source_depth,
        source_points=source_points,
        target_depth=target_depth,
        target_points=target_points,
        graph=graph,
        skin=skin,
        gt_motion=gt_motion,
        scene_flow=flow,
        corr=corr,
        mask_corr=mask_corr,
        mask_flow=source_depth.valid.copy(),
        mask_nodes=np.ones(n, dtype=bool),
        deform=deform,
        surface_depth=depth_fn,
        target_param_map=param_map,
    )


@dataclass
class RigidSequence:
    """A rigidly moving synthetic sequence with exact two-way correspondences."""

    frames: list  # DepthImage per frame; frame 0 is the canonical keyframe
    intrinsics: CameraIntrinsics
    gt_translations: np.ndarray  # (n_frames, N, 3) per-node ground truth
    graph: DeformationGraph
    deforms: list = field(repr=False, default=None)
    points: list = field(repr=False, default=None)

    def provider(self, k, f):
        """FramePair of exact forward/backward correspondences for (k, f)."""
        from .tracker import FramePair

        w = self.frames[0].width
        h = self.frames[0].height
        intr = self.intrinsics

        def direction(src_idx, dst_idx):
            pts = self.points[src_idx]
            ys, xs = np.nonzero(pts.valid)
            q = pts.points[ys, xs]
            canon_pts = self.deforms[src_idx].inverse(q)
            uv0, ok0 = project_points(canon_pts, intr)
            px = np.round(uv0).astype(np.int64)
            inb0 = (
                (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)
            )
            pxc = np.clip(px, 0, [w - 1, h - 1])
            canon_ok = inb0 & ok0 & self.points[0].valid[pxc[:, 1], pxc[:, 0]]
            p_canon = self.points[0].points[pxc[:, 1], pxc[:, 0]]
            target, okt = project_points(self.deforms[dst_idx].fn(p_canon), intr)
            inbt = (
                (target[:, 0] >= 0) & (target[:, 0] <= w - 1)
                & (target[:, 1] >= 0) & (target[:, 1] <= h - 1)
            )
            corr = CorrespondenceSet(
                source_px=np.stack([xs, ys], axis=1).astype(np.int32),
                target=target,
                weight=np.ones(xs.size),
                valid=canon_ok & okt & inbt,
            )
            canon_ids = pxc[:, 1] * w + pxc[:, 0]
            return corr, canon_ids

        fwd, canon = direction(k, f)
        bwd, _ = direction(f, k)
        return FramePair(fwd, bwd, canon)


def generate_rigid_sequence(n_frames, resolution=(48, 36), seed=0,
                            step=(0.012, -0.006, 0.008), rot_step=0.004,
                            sigma=0.05, k_neighbors=8, edge_len_max=0.05):
    """Frames of one plane under a growing rigid motion, with ground truth."""
    if n_frames < 2:
        raise GenerationError("need at least 2 frames")
    width, height = int(resolution[0]), int(resolution[1])
    rng = np.random.default_rng(seed)
    intr, boxes = _scene_layout(width, height, "rigid")
    depth_fn = _surface_fn("rigid", intr, width)

    fg = np.zeros((height, width), dtype=bool)
    for (x0, x1, y0, y1) in boxes:
        fg[y0:y1, x0:x1] = True
    gx, gy = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    depth0 = np.where(fg, depth_fn(np.stack([gx, gy], axis=-1)), 0.0)
    frame0 = DepthImage.from_depth(depth0)
    points0 = point_image_from_depth(frame0, intr)
    pivot = points0.points[fg].mean(axis=0)
    axis = rng.normal(size=3)
    step = np.asarray(step, dtype=np.float64)

    deforms = []
    frames = [frame0]
    points = [points0]
    for j in range(n_frames):
        d = _make_rigid(_rot_about_axis(axis, j * rot_step), j * step, pivot)
        deforms.append(d)
        if j > 0:
            depth_j, _ = _render_target(depth_fn, d, intr, boxes, width, height)
            frames.append(depth_j)
            points.append(point_image_from_depth(depth_j, intr))

    graph = DeformationGraph.build(points0, sigma, k_neighbors, edge_len_max)
    gt = np.stack([d.fn(graph.nodes) - graph.nodes for d in deforms], axis=0)
    return RigidSequence(
        frames=frames, intrinsics=intr, gt_translations=gt, graph=graph,
        deforms=deforms, points=points,
    )


def inject_outliers(scene, fraction, seed=0):
    """Replace a fraction of valid correspondences with uniform random image
    locations whose sampled 3D target disagrees by more than OUTLIER_MIN_3D.

    Returns (corrupted CorrespondenceSet with weights reset to 1, labels)
    where labels marks the corrupted entries.
    """
    if not 0 <= fraction < 1:
        raise GenerationError(f"outlier fraction must be in [0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    corr = scene.corr.copy()
    corr.weight = np.ones(len(corr))
    labels = np.zeros(len(corr), dtype=bool)
    valid_idx = np.flatnonzero(corr.valid)
    n_out = int(round(fraction * valid_idx.size))
    if n_out == 0:
        return corr, labels
    chosen = rng.choice(valid_idx, size=n_out, replace=False)
    w, h = scene.resolution
    true_pts, _ = bilinear_sample_many(scene.target_points, corr.target[chosen])
    for row, k in enumerate(chosen):
        for _ in range(100):
            cand = np.array([rng.uniform(0, w - 1), rng.uniform(0, h - 1)])
            pt, ok = bilinear_sample_many(scene.target_points, cand[None, :])
            if not ok[0]:
                break  # off-surface sample: certainly wrong, keep it
            if np.linalg.norm(pt[0] - true_pts[row]) > OUTLIER_MIN_3D:
                break
        corr.target[k] = cand
        labels[k] = True
    return corr, labels


def add_noise(scene, corr_sigma_px=0.0, depth_sigma_m=0.0, seed=0):
    """Gaussian perturbation of correspondence locations and target depth.

    Masks and ground truth are unchanged; bit-reproducible for a fixed seed.
    """
    if corr_sigma_px < 0 or depth_sigma_m < 0:
        raise GenerationError("noise sigmas must be non-negative")
    rng = np.random.default_rng(seed)
    corr = scene.corr.copy()
    if corr_sigma_px > 0:
        corr.target = corr.target + rng.normal(0.0, corr_sigma_px, corr.target.shape)
    target_depth = scene.target_depth
    target_points = scene.target_points
    if depth_sigma_m > 0:
        d = target_depth.depth.copy()
        noise = rng.normal(0.0, depth_sigma_m, d.shape)
        d[target_depth.valid] += noise[target_depth.valid]
        target_depth = DepthImage(d, target_depth.valid.copy())
        target_points = point_image_from_depth(target_depth, scene.intrinsics)
    return SyntheticScene(
        kind=scene.kind,
        seed=scene.seed,
        intrinsics=scene.intrinsics,
        source_depth=scene.source_depth,
        source_points=scene.source_points,
        target_depth=target_depth,
        target_points=target_points,
        graph=scene.graph,
        skin=scene.skin,
        gt_motion=scene.gt_motion,
        scene_flow=scene.scene_flow,
        corr=corr,
        mask_corr=scene.mask_corr,
        mask_flow=scene.mask_flow,
        mask_nodes=scene.mask_nodes,
        deform=scene.deform,
        surface_depth=scene.surface_depth,
        target_param_map=scene.target_param_map,
    )
