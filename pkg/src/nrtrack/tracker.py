"""Keyframe-based frame-to-keyframe tracking with correspondence filtering.

Filters run in a fixed order: importance-weight threshold, bidirectional
consistency, multi-keyframe consistency. Keyframes that keep fewer than
min_valid_fraction of their correspondences are ignored for that frame.
The per-frame solve runs on the pooled survivors against the canonical
(first-keyframe) graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .energy import CorrespondenceSet
from .errors import TrackingError, UnderdeterminedSystemError
from .geometry import bilinear_sample_many, point_image_from_depth
from .graphbuild import DeformationGraph, compute_skinning
from .solver import SolverConfig, gauss_newton_solve, graph_error3d


@dataclass
class KeyframePolicy:
    keyframe_interval: int = 50
    weight_threshold: float = 0.35
    min_valid_fraction: float = 0.5
    bidir_threshold: float = 0.20  # meters
    multikf_threshold: float = 0.15  # meters
    soft_bidir: bool = False  # reweight instead of reject
    soft_bidir_tau: float = 0.1  # meters

    def __post_init__(self):
        if min(self.weight_threshold, self.bidir_threshold,
               self.multikf_threshold, self.keyframe_interval) <= 0:
            raise ValueError("policy thresholds must be positive")
        if not 0 < self.min_valid_fraction <= 1:
            raise ValueError("min_valid_fraction must be in (0, 1]")

    def to_dict(self):
        return {
            "keyframe_interval": self.keyframe_interval,
            "weight_threshold": self.weight_threshold,
            "min_valid_fraction": self.min_valid_fraction,
            "bidir_threshold": self.bidir_threshold,
            "multikf_threshold": self.multikf_threshold,
            "soft_bidir": self.soft_bidir,
            "soft_bidir_tau": self.soft_bidir_tau,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in d})


@dataclass
class FilterStats:
    keyframe: int
    n_input: int
    rejected_threshold: int = 0
    rejected_bidir: int = 0
    rejected_multikf: int = 0
    n_valid: int = 0

    def to_dict(self):
        return self.__dict__.copy()


@dataclass
class FrameResult:
    frame: int
    untracked: bool
    keyframes_used: list
    motion: object = None
    graph_error: float = None
    stats: list = field(default_factory=list)


@dataclass
class TrackedSequence:
    frames: list
    keyframes: list


def threshold_filter(corr, delta):
    """Keep entries with weight >= delta (boundary kept); returns a mask."""
    return corr.valid & (corr.weight >= delta)


def bidirectional_filter(forward, backward, kf_points, threshold,
                         active=None, soft=False, tau=0.1):
    """Round-trip consistency in keyframe space.

    Follow u -> c_u with the forward set, sample the backward field at c_u
    to land back in the keyframe, and compare the 3D keyframe points. Error
    above threshold (or an unresolvable round trip) rejects the entry. In
    soft mode entries are kept and a weight factor exp(-err^2 / (2 tau^2))
    is returned instead.
    """
    h, w = kf_points.valid.shape
    bw_field = np.zeros((h, w, 2))
    bw_valid = np.zeros((h, w), dtype=bool)
    bx = backward.source_px[:, 0]
    by = backward.source_px[:, 1]
    inb = (bx >= 0) & (bx < w) & (by >= 0) & (by < h)
    sel = backward.valid & inb
    bw_field[by[sel], bx[sel]] = backward.target[sel]
    bw_valid[by[sel], bx[sel]] = True

    from .geometry import PointImage

    bw_img = PointImage(
        np.concatenate([bw_field, np.zeros((h, w, 1))], axis=2), bw_valid
    )
    active = forward.valid if active is None else active
    round_uv, ok_uv = bilinear_sample_many(bw_img, forward.target)
    round_pt, ok_pt = bilinear_sample_many(kf_points, round_uv[..., :2])
    fx = np.clip(forward.source_px[:, 0], 0, w - 1)
    fy = np.clip(forward.source_px[:, 1], 0, h - 1)
    p_u = kf_points.points[fy, fx]
    err = np.linalg.norm(round_pt - p_u, axis=1)
    resolvable = ok_uv & ok_pt
    if soft:
        factor = np.where(resolvable, np.exp(-(err**2) / (2 * tau**2)), 0.0)
        return active & resolvable, factor
    keep = active & resolvable & (err <= threshold)
    return keep, None


def multi_keyframe_filter(predictions, threshold):
    """Reject all predictions of a canonical point when any strays from the
    per-point mean by more than threshold.

    predictions: list over keyframes of (canonical_ids (Ki,), points (Ki, 3),
    valid (Ki,)). Returns a list of keep masks, one per keyframe. With fewer
    than two live predictions for a point the filter is a no-op.
    """
    sums = {}
    counts = {}
    for ids, pts, valid in predictions:
        for i in np.flatnonzero(valid):
            key = int(ids[i])
            sums[key] = sums.get(key, 0.0) + pts[i]
            counts[key] = counts.get(key, 0) + 1
    means = {k: sums[k] / counts[k] for k in sums}
    rejected = set()
    for ids, pts, valid in predictions:
        for i in np.flatnonzero(valid):
            key = int(ids[i])
            if counts[key] < 2:
                continue
            if np.linalg.norm(pts[i] - means[key]) > threshold:
                rejected.add(key)
    keeps = []
    for ids, pts, valid in predictions:
        keep = valid.copy()
        for i in np.flatnonzero(valid):
            if int(ids[i]) in rejected:
                keep[i] = False
        keeps.append(keep)
    return keeps


@dataclass
class FramePair:
    """Correspondences between one keyframe and one frame."""

    forward: CorrespondenceSet  # keyframe -> frame, source pixels in keyframe
    backward: CorrespondenceSet  # frame -> keyframe
    canonical_ids: np.ndarray  # (K,) canonical pixel ids in the first keyframe


def track_sequence(frames, intrinsics, provider, policy=None, config=None,
                   sigma=0.05, k_neighbors=8, edge_len_max=0.05,
                   gt_translations=None):
    """Track every frame of a sequence against its keyframes.

    frames: list of DepthImage. provider(kf_index, frame_index) -> FramePair.
    The deformation graph lives on the first keyframe; pooled correspondences
    are keyed by canonical pixel there. Frames with no valid keyframe are
    flagged untracked and the sequence continues.
    """
    policy = policy or KeyframePolicy()
    config = config or SolverConfig()
    if len(frames) < 2:
        raise TrackingError("need at least 2 frames to track")

    keyframes = list(range(0, len(frames), policy.keyframe_interval))
    points = [point_image_from_depth(d, intrinsics) for d in frames]
    graph = DeformationGraph.build(points[0], sigma, k_neighbors, edge_len_max)
    skin = compute_skinning(points[0], graph.nodes, sigma)

    results = []
    for f in range(1, len(frames)):
        kfs = [k for k in keyframes if k < f]
        per_kf = []
        stats = []
        for k in kfs:
            pair = provider(k, f)
            st = FilterStats(keyframe=k, n_input=int(len(pair.forward)))
            keep0 = pair.forward.valid.copy()
            keep1 = threshold_filter(pair.forward, policy.weight_threshold)
            st.rejected_threshold = int((keep0 & ~keep1).sum())
            keep2, factor = bidirectional_filter(
                pair.forward, pair.backward, points[k],
                policy.bidir_threshold, active=keep1,
                soft=policy.soft_bidir, tau=policy.soft_bidir_tau,
            )
            st.rejected_bidir = int((keep1 & ~keep2).sum())
            per_kf.append((k, pair, keep2, factor, st))
            stats.append(st)

        if len(per_kf) > 1:
            preds = []
            for k, pair, keep, _, _ in per_kf:
                pts, okp = bilinear_sample_many(points[f], pair.forward.target)
                preds.append((pair.canonical_ids, pts, keep & okp))
            keeps = multi_keyframe_filter(preds, policy.multikf_threshold)
            updated = []
            for (k, pair, keep, factor, st), keep_mk in zip(per_kf, keeps):
                st.rejected_multikf = int((keep & ~keep_mk).sum())
                updated.append((k, pair, keep & keep_mk, factor, st))
            per_kf = updated

        pooled_px = []
        pooled_target = []
        pooled_weight = []
        used_kfs = []
        w_img, h_img = points[0].width, points[0].height
        for k, pair, keep, factor, st in per_kf:
            st.n_valid = int(keep.sum())
            frac = st.n_valid / max(st.n_input, 1)
            if frac < policy.min_valid_fraction:
                continue
            used_kfs.append(k)
            idx = np.flatnonzero(keep)
            canon = pair.canonical_ids[idx]
            pooled_px.append(
                np.stack([canon % w_img, canon // w_img], axis=1).astype(np.int32)
            )
            pooled_target.append(pair.forward.target[idx])
            wgt = pair.forward.weight[idx]
            if factor is not None:
                wgt = np.clip(wgt * factor[idx], 1e-9, 1.0)
            pooled_weight.append(wgt)

        if not used_kfs:
            results.append(FrameResult(frame=f, untracked=True,
                                       keyframes_used=[], stats=stats))
            continue

        corr = CorrespondenceSet(
            source_px=np.concatenate(pooled_px, axis=0),
            target=np.concatenate(pooled_target, axis=0),
            weight=np.concatenate(pooled_weight, axis=0),
            valid=np.ones(sum(len(p) for p in pooled_px), dtype=bool),
        )
        try:
            solve = gauss_newton_solve(
                graph, skin, corr, points[0], points[f], intrinsics, config
            )
        except UnderdeterminedSystemError:
            results.append(FrameResult(frame=f, untracked=True,
                                       keyframes_used=used_kfs, stats=stats))
            continue
        gerr = None
        if gt_translations is not None:
            gerr = graph_error3d(solve.motion, gt_translations[f], solve.node_mask)
        results.append(FrameResult(
            frame=f, untracked=False, keyframes_used=used_kfs,
            motion=solve.motion, graph_error=gerr, stats=stats,
        ))
    return TrackedSequence(frames=results, keyframes=keyframes), graph
