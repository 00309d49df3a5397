"""Command-line interface: solve, synth, gradcheck, learn-weights, track."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .diffsolver import gradient_check, optimize_weights
from .graphbuild import DeformationGraph, compute_skinning
from .solver import SolverConfig, evaluate_metrics, gauss_newton_solve
from .synth import generate_scene
from .tracker import FramePair, KeyframePolicy, track_sequence


def _solver_config(args):
    return SolverConfig(
        max_iter=args.iters,
        lambda_2d=args.lambda2d,
        lambda_depth=args.lambdadepth,
        lambda_reg=args.lambdareg,
        min_cluster_correspondences=args.min_cluster,
        seed=args.seed,
        correspondence_subsample=args.subsample,
    )


def cmd_solve(args):
    source = fileio.load_depth(args.source)
    target = fileio.load_depth(args.target)
    intr = fileio.read_intrinsics_json(args.intrinsics)
    corr = fileio.read_correspondences(args.corr)

    from .geometry import point_image_from_depth

    source_pts = point_image_from_depth(source, intr)
    target_pts = point_image_from_depth(target, intr)
    if args.graph == "auto":
        graph = DeformationGraph.build(source_pts, args.sigma)
    else:
        graph = fileio.read_graph_json(args.graph)
    skin = compute_skinning(source_pts, graph.nodes, graph.sigma)

    result = gauss_newton_solve(
        graph, skin, corr, source_pts, target_pts, intr, _solver_config(args)
    )
    fileio.write_motion_json(args.out, result.motion)
    metrics = {
        "residual_norms": result.residual_norms,
        "usable_correspondences": result.usable_count,
        "dropped_clusters": result.dropped_clusters,
        "active_nodes": int(result.node_mask.sum()),
    }
    if args.metrics_out:
        Path(args.metrics_out).write_text(json.dumps(metrics) + "\n")
    print(json.dumps(metrics))
    return 0


def cmd_synth(args):
    w, h = (int(v) for v in args.res.lower().split("x"))
    scene = generate_scene(args.kind, (w, h), args.seed)
    fileio.write_scene_dir(scene, args.out)
    print(f"wrote scene kind={args.kind} res={w}x{h} seed={args.seed} "
          f"nodes={scene.graph.n_nodes} to {args.out}")
    return 0


def cmd_gradcheck(args):
    scene = fileio.LoadedScene(args.scene)
    config = SolverConfig(
        min_cluster_correspondences=args.min_cluster,
        correspondence_subsample=args.subsample,
        seed=args.seed,
    )
    report = gradient_check(
        scene.graph, scene.skin, scene.corr, scene.source_points,
        scene.target_points, scene.intrinsics, config,
        scene.gt_motion.translations, scene.flow_target(), scene.mask_flow,
        eps_w=args.eps_w, eps_c=args.eps_c, max_params=args.max_params,
        seed=args.seed,
    )
    payload = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(payload + "\n")
    print(json.dumps({k: report[k] for k in report if k != "entries"}))
    return 0


def cmd_learn_weights(args):
    from .synth import inject_outliers

    scene = fileio.LoadedScene(args.scene)
    meta_seed = scene.meta.get("seed", 0)
    corrupted, labels = None, None
    if args.outliers > 0:
        # Rebuild the analytic scene for outlier resampling support.
        kind = scene.meta.get("kind", "rigid")
        res = scene.meta.get("resolution", [scene.source_depth.width,
                                            scene.source_depth.height])
        full = generate_scene(kind, tuple(res), meta_seed)
        corrupted, labels = inject_outliers(full, args.outliers, seed=args.seed)
    else:
        corrupted, labels = scene.corr.copy(), np.zeros(len(scene.corr), dtype=bool)

    config = SolverConfig(
        min_cluster_correspondences=args.min_cluster,
        correspondence_subsample=args.subsample,
        seed=args.seed,
    )
    result = optimize_weights(
        scene.graph, scene.skin, corrupted, scene.source_points,
        scene.target_points, scene.intrinsics, config,
        scene.gt_motion.translations, scene.flow_target(), scene.mask_flow,
        steps=args.steps, step_size=args.lr,
    )
    payload = {
        "weights": result.weights.tolist(),
        "outlier_labels": labels.astype(int).tolist(),
    }
    Path(args.out).write_text(json.dumps(payload) + "\n")
    if args.curve:
        with open(args.curve, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "loss"])
            for i, v in enumerate(result.loss_curve):
                writer.writerow([i, repr(v)])
    med_in = float(np.median(result.weights[~labels])) if (~labels).any() else 0.0
    med_out = float(np.median(result.weights[labels])) if labels.any() else 0.0
    print(json.dumps({"median_inlier_weight": med_in,
                      "median_outlier_weight": med_out,
                      "final_loss": result.loss_curve[-1] if result.loss_curve else None}))
    return 0


def cmd_track(args):
    frames_dir = Path(args.frames)
    intr = fileio.read_intrinsics_json(frames_dir / "intrinsics.json")
    frame_files = sorted(frames_dir.glob("frame_*.bin")) or sorted(
        frames_dir.glob("frame_*.png")
    )
    frames = [fileio.load_depth(p) for p in frame_files]
    policy = KeyframePolicy.from_dict(json.loads(Path(args.policy).read_text())) \
        if args.policy else KeyframePolicy()
    corr_dir = Path(args.corr_dir)

    def provider(k, f):
        fwd = fileio.read_correspondences(corr_dir / f"corr_f_{k:04d}_{f:04d}.cor1")
        bwd = fileio.read_correspondences(corr_dir / f"corr_b_{k:04d}_{f:04d}.cor1")
        canon_path = corr_dir / f"canon_{k:04d}_{f:04d}.bin"
        if canon_path.exists():
            canon = np.fromfile(canon_path, dtype="<u4").astype(np.int64)
        else:
            w = frames[0].width
            canon = (fwd.source_px[:, 1].astype(np.int64) * w
                     + fwd.source_px[:, 0])
        return FramePair(fwd, bwd, canon)

    config = SolverConfig(
        min_cluster_correspondences=args.min_cluster, seed=args.seed
    )
    sequence, graph = track_sequence(frames, intr, provider, policy, config,
                                     sigma=args.sigma)
    payload = {
        "keyframes": sequence.keyframes,
        "frames": [
            {
                "frame": fr.frame,
                "untracked": fr.untracked,
                "keyframes_used": fr.keyframes_used,
                "motion": None if fr.motion is None else [
                    {"R": fr.motion.rotations[i].reshape(-1).tolist(),
                     "t": fr.motion.translations[i].tolist()}
                    for i in range(fr.motion.n_nodes)
                ],
            }
            for fr in sequence.frames
        ],
    }
    Path(args.out).write_text(json.dumps(payload) + "\n")
    stats_path = args.stats_csv or str(Path(args.out).with_suffix(".stats.csv"))
    with open(stats_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "keyframe", "n_input", "rejected_threshold",
                         "rejected_bidir", "rejected_multikf", "n_valid"])
        for fr in sequence.frames:
            for st in fr.stats:
                writer.writerow([fr.frame, st.keyframe, st.n_input,
                                 st.rejected_threshold, st.rejected_bidir,
                                 st.rejected_multikf, st.n_valid])
    tracked = sum(1 for fr in sequence.frames if not fr.untracked)
    print(json.dumps({"frames": len(sequence.frames), "tracked": tracked,
                      "nodes": graph.n_nodes}))
    return 0


def _add_common_solver_args(p):
    p.add_argument("--iters", type=int, default=3)
    p.add_argument("--lambda2d", type=float, default=0.001)
    p.add_argument("--lambdadepth", type=float, default=1.0)
    p.add_argument("--lambdareg", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-cluster", type=int, default=2000, dest="min_cluster")
    p.add_argument("--subsample", type=int, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="nrtrack")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="align a source depth frame to a target")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--corr", required=True)
    p.add_argument("--graph", default="auto")
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--metrics-out", default=None, dest="metrics_out")
    _add_common_solver_args(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("synth", help="generate a synthetic scene directory")
    p.add_argument("--kind", required=True)
    p.add_argument("--res", default="96x72")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference gradient report")
    p.add_argument("--scene", required=True)
    p.add_argument("--eps-w", type=float, default=1e-4, dest="eps_w")
    p.add_argument("--eps-c", type=float, default=1e-3, dest="eps_c")
    p.add_argument("--out", default=None)
    p.add_argument("--max-params", type=int, default=None, dest="max_params")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-cluster", type=int, default=50, dest="min_cluster")
    p.add_argument("--subsample", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("learn-weights", help="self-supervised weight optimization")
    p.add_argument("--scene", required=True)
    p.add_argument("--outliers", type=float, default=0.3)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.add_argument("--curve", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-cluster", type=int, default=50, dest="min_cluster")
    p.add_argument("--subsample", type=int, default=None)
    p.set_defaults(func=cmd_learn_weights)

    p = sub.add_parser("track", help="keyframe tracking over a frame sequence")
    p.add_argument("--frames", required=True)
    p.add_argument("--policy", default=None)
    p.add_argument("--corr-dir", required=True, dest="corr_dir")
    p.add_argument("--out", required=True)
    p.add_argument("--stats-csv", default=None, dest="stats_csv")
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-cluster", type=int, default=50, dest="min_cluster")
    p.set_defaults(func=cmd_track)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
