"""File formats for depth, intrinsics, graphs, skinning, motion,
correspondences, scene flow, and masks.

Binary formats are little-endian with 4-byte magic headers:
  DGN1  raw depth: u32 width, u32 height, f32 depths row-major (0 = invalid)
  COR1  correspondences: u32 count, then per entry
        u16 ux, u16 uy, f32 cx, f32 cy, f32 w, u8 valid
  SKN1  skinning: u32 width, u32 height, then per pixel
        4x u32 node index (0xFFFFFFFF = none), 4x f32 weight
  SFL1  scene flow: u32 width, u32 height, f32 xyz triples row-major
  MSK1  masks: u32 width, u32 height, u32 node count, then u8 arrays
        mask_corr (W*H), mask_flow (W*H), mask_nodes (N)

Depth PNGs are 16-bit grayscale in millimeters (0 = invalid).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .energy import CorrespondenceSet
from .errors import InvalidInputError
from .geometry import CameraIntrinsics, DepthImage
from .graphbuild import SKIN_SUPPORT, DeformationGraph, SkinningTable
from .warpfield import GraphMotion

_SKIN_NONE = 0xFFFFFFFF


def write_depth_png(path, depth_image):
    mm = np.round(depth_image.depth * 1000.0)
    mm = np.where(depth_image.valid, np.clip(mm, 1, 65535), 0)
    Image.fromarray(mm.astype("<u2"), mode="I;16").save(str(path))


def read_depth_png(path):
    arr = np.asarray(Image.open(str(path)), dtype=np.float64)
    return DepthImage.from_depth(arr / 1000.0)


def write_depth_raw(path, depth_image):
    h, w = depth_image.depth.shape
    data = np.where(depth_image.valid, depth_image.depth, 0.0).astype("<f4")
    with open(path, "wb") as f:
        f.write(b"DGN1")
        f.write(struct.pack("<II", w, h))
        f.write(data.tobytes())


def read_depth_raw(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != b"DGN1":
            raise InvalidInputError(f"bad depth magic {magic!r} in {path}")
        w, h = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(4 * w * h), dtype="<f4").reshape(h, w)
    return DepthImage.from_depth(data.astype(np.float64))


def load_depth(path):
    """Sniff PNG vs raw by magic bytes."""
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == b"DGN1":
        return read_depth_raw(path)
    return read_depth_png(path)


def write_intrinsics_json(path, intrinsics):
    Path(path).write_text(json.dumps(intrinsics.to_dict(), indent=1) + "\n")


def read_intrinsics_json(path):
    return CameraIntrinsics.from_dict(json.loads(Path(path).read_text()))


def write_graph_json(path, graph):
    payload = {
        "nodes": graph.nodes.tolist(),
        "edges": [[int(j) for j in row if j >= 0] for row in graph.edges],
        "clusters": graph.clusters.tolist(),
        "sigma": graph.sigma,
    }
    Path(path).write_text(json.dumps(payload) + "\n")


def read_graph_json(path):
    d = json.loads(Path(path).read_text())
    nodes = np.asarray(d["nodes"], dtype=np.float64)
    k = max((len(row) for row in d["edges"]), default=0)
    edges = np.full((nodes.shape[0], max(k, 1)), -1, dtype=np.int32)
    for i, row in enumerate(d["edges"]):
        edges[i, : len(row)] = row
    return DeformationGraph(
        nodes=nodes,
        edges=edges,
        clusters=np.asarray(d["clusters"], dtype=np.int32),
        sigma=float(d["sigma"]),
    )


def write_skinning(path, skin):
    h, w, m = skin.anchors.shape
    if m != SKIN_SUPPORT:
        raise InvalidInputError(f"SKN1 stores {SKIN_SUPPORT} anchors, got {m}")
    anchors = skin.anchors.astype(np.int64)
    anchors = np.where(anchors < 0, _SKIN_NONE, anchors).astype("<u4")
    weights = skin.weights.astype("<f4")
    with open(path, "wb") as f:
        f.write(b"SKN1")
        f.write(struct.pack("<II", w, h))
        inter = np.concatenate(
            [anchors.reshape(h * w, m).view("<u4"),
             weights.reshape(h * w, m).view("<u4")],
            axis=1,
        )
        f.write(inter.tobytes())


def read_skinning(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != b"SKN1":
            raise InvalidInputError(f"bad skinning magic {magic!r} in {path}")
        w, h = struct.unpack("<II", f.read(8))
        m = SKIN_SUPPORT
        raw = np.frombuffer(f.read(h * w * m * 8), dtype="<u4").reshape(h * w, 2 * m)
    anchors = raw[:, :m].astype(np.int64)
    anchors = np.where(anchors == _SKIN_NONE, -1, anchors).astype(np.int32)
    weights = raw[:, m:].view("<f4")[:, :m].astype(np.float64)
    return SkinningTable(anchors.reshape(h, w, m), weights.reshape(h, w, m).copy())


def write_motion_json(path, motion):
    payload = [
        {"R": motion.rotations[i].reshape(-1).tolist(),
         "t": motion.translations[i].tolist()}
        for i in range(motion.n_nodes)
    ]
    Path(path).write_text(json.dumps(payload) + "\n")


def read_motion_json(path):
    data = json.loads(Path(path).read_text())
    n = len(data)
    rot = np.empty((n, 3, 3))
    trans = np.empty((n, 3))
    for i, d in enumerate(data):
        rot[i] = np.asarray(d["R"], dtype=np.float64).reshape(3, 3)
        trans[i] = np.asarray(d["t"], dtype=np.float64)
    return GraphMotion(rot, trans)


def write_correspondences(path, corr):
    k = len(corr)
    rec = np.zeros(
        k,
        dtype=[("ux", "<u2"), ("uy", "<u2"), ("cx", "<f4"), ("cy", "<f4"),
               ("w", "<f4"), ("valid", "u1")],
    )
    rec["ux"] = corr.source_px[:, 0]
    rec["uy"] = corr.source_px[:, 1]
    rec["cx"] = corr.target[:, 0]
    rec["cy"] = corr.target[:, 1]
    rec["w"] = corr.weight
    rec["valid"] = corr.valid.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"COR1")
        f.write(struct.pack("<I", k))
        f.write(rec.tobytes())


def read_correspondences(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != b"COR1":
            raise InvalidInputError(f"bad correspondence magic {magic!r} in {path}")
        (k,) = struct.unpack("<I", f.read(4))
        rec = np.frombuffer(
            f.read(k * 13),
            dtype=[("ux", "<u2"), ("uy", "<u2"), ("cx", "<f4"), ("cy", "<f4"),
                   ("w", "<f4"), ("valid", "u1")],
        )
    return CorrespondenceSet(
        source_px=np.stack([rec["ux"], rec["uy"]], axis=1).astype(np.int32),
        target=np.stack([rec["cx"], rec["cy"]], axis=1).astype(np.float64),
        weight=rec["w"].astype(np.float64),
        valid=rec["valid"].astype(bool),
    )


def write_scene_flow(path, flow):
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(b"SFL1")
        f.write(struct.pack("<II", w, h))
        f.write(np.asarray(flow, dtype="<f4").tobytes())


def read_scene_flow(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != b"SFL1":
            raise InvalidInputError(f"bad scene-flow magic {magic!r} in {path}")
        w, h = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(12 * w * h), dtype="<f4")
    return data.reshape(h, w, 3).astype(np.float64)


def write_masks(path, mask_corr, mask_flow, mask_nodes):
    h, w = mask_corr.shape
    with open(path, "wb") as f:
        f.write(b"MSK1")
        f.write(struct.pack("<III", w, h, len(mask_nodes)))
        f.write(np.asarray(mask_corr, dtype=np.uint8).tobytes())
        f.write(np.asarray(mask_flow, dtype=np.uint8).tobytes())
        f.write(np.asarray(mask_nodes, dtype=np.uint8).tobytes())


def read_masks(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != b"MSK1":
            raise InvalidInputError(f"bad mask magic {magic!r} in {path}")
        w, h, n = struct.unpack("<III", f.read(12))
        mc = np.frombuffer(f.read(w * h), dtype=np.uint8).reshape(h, w).astype(bool)
        mf = np.frombuffer(f.read(w * h), dtype=np.uint8).reshape(h, w).astype(bool)
        mn = np.frombuffer(f.read(n), dtype=np.uint8).astype(bool)
    return mc, mf, mn


def write_scene_dir(scene, out_dir):
    """Persist a synthetic scene in the formats the CLI consumes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_intrinsics_json(out / "intrinsics.json", scene.intrinsics)
    write_depth_raw(out / "source_depth.bin", scene.source_depth)
    write_depth_raw(out / "target_depth.bin", scene.target_depth)
    write_depth_png(out / "source_depth.png", scene.source_depth)
    write_depth_png(out / "target_depth.png", scene.target_depth)
    write_graph_json(out / "graph.json", scene.graph)
    write_skinning(out / "skinning.bin", scene.skin)
    write_correspondences(out / "corr.bin", scene.corr)
    write_motion_json(out / "gt_motion.json", scene.gt_motion)
    write_scene_flow(out / "scene_flow.bin", scene.scene_flow)
    write_masks(out / "masks.bin", scene.mask_corr, scene.mask_flow, scene.mask_nodes)
    meta = {"kind": scene.kind, "seed": scene.seed,
            "resolution": list(scene.resolution)}
    (out / "meta.json").write_text(json.dumps(meta) + "\n")


class LoadedScene:
    """A scene directory reloaded as plain arrays (no analytic callables)."""

    def __init__(self, path):
        p = Path(path)
        self.intrinsics = read_intrinsics_json(p / "intrinsics.json")
        self.source_depth = read_depth_raw(p / "source_depth.bin")
        self.target_depth = read_depth_raw(p / "target_depth.bin")
        self.graph = read_graph_json(p / "graph.json")
        self.skin = read_skinning(p / "skinning.bin")
        self.corr = read_correspondences(p / "corr.bin")
        self.gt_motion = read_motion_json(p / "gt_motion.json")
        self.scene_flow = read_scene_flow(p / "scene_flow.bin")
        self.mask_corr, self.mask_flow, self.mask_nodes = read_masks(p / "masks.bin")
        meta_path = p / "meta.json"
        self.meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}

        from .geometry import point_image_from_depth

        self.source_points = point_image_from_depth(self.source_depth, self.intrinsics)
        self.target_points = point_image_from_depth(self.target_depth, self.intrinsics)

    def flow_target(self):
        return self.source_points.points + self.scene_flow
