"""Pinhole camera model, depth/point image containers, projection pair.

All geometry runs in double precision. Depth value 0 encodes an invalid
pixel; validity travels as a boolean mask and never as a sentinel inside
arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, InvalidInputError


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidInputError(f"intrinsics must be finite, got {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError(
                f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}"
            )

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


@dataclass
class DepthImage:
    """Per-pixel depth in meters with validity mask."""

    depth: np.ndarray  # (H, W) float64, meters
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.depth.shape != self.valid.shape or self.depth.ndim != 2:
            raise InvalidInputError("depth and valid must be matching 2D arrays")

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]

    @classmethod
    def from_depth(cls, depth):
        """Build from a raw depth array; 0 or non-finite marks invalid."""
        depth = np.asarray(depth, dtype=np.float64)
        valid = np.isfinite(depth) & (depth > 0)
        clean = np.where(valid, depth, 0.0)
        return cls(clean, valid)


@dataclass
class PointImage:
    """Per-pixel 3D points (camera frame, meters) with validity mask."""

    points: np.ndarray  # (H, W, 3) float64
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise InvalidInputError("points must be (H, W, 3)")
        if self.points.shape[:2] != self.valid.shape:
            raise InvalidInputError("points and valid shapes disagree")

    @property
    def height(self):
        return self.points.shape[0]

    @property
    def width(self):
        return self.points.shape[1]


def backproject(u, d, intrinsics):
    """Inverse perspective projection of pixel ``u`` at depth ``d`` (meters)."""
    d = float(d)
    if not np.isfinite(d) or d <= 0:
        raise InvalidInputError(f"depth must be positive and finite, got {d}")
    ux, uy = float(u[0]), float(u[1])
    return np.array(
        [
            (ux - intrinsics.cx) * d / intrinsics.fx,
            (uy - intrinsics.cy) * d / intrinsics.fy,
            d,
        ]
    )


def backproject_pixels(us, ds, intrinsics):
    """Vectorized backprojection; us (..., 2) pixel coords, ds (...) depths."""
    us = np.asarray(us, dtype=np.float64)
    ds = np.asarray(ds, dtype=np.float64)
    out = np.empty(us.shape[:-1] + (3,))
    out[..., 0] = (us[..., 0] - intrinsics.cx) * ds / intrinsics.fx
    out[..., 1] = (us[..., 1] - intrinsics.cy) * ds / intrinsics.fy
    out[..., 2] = ds
    return out


def point_image_from_depth(depth_image, intrinsics):
    """Backproject every valid pixel of a DepthImage into a PointImage."""
    h, w = depth_image.depth.shape
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.zeros((h, w, 3))
    d = depth_image.depth
    pts[..., 0] = (gx - intrinsics.cx) * d / intrinsics.fx
    pts[..., 1] = (gy - intrinsics.cy) * d / intrinsics.fy
    pts[..., 2] = d
    pts[~depth_image.valid] = 0.0
    return PointImage(pts, depth_image.valid.copy())


def project(p, intrinsics):
    """Perspective projection to continuous pixel coordinates; requires z > 0."""
    p = np.asarray(p, dtype=np.float64)
    if p[2] <= 0:
        raise BehindCameraError(f"point has non-positive depth z={p[2]}")
    return np.array(
        [
            intrinsics.fx * p[0] / p[2] + intrinsics.cx,
            intrinsics.fy * p[1] / p[2] + intrinsics.cy,
        ]
    )


def project_points(ps, intrinsics):
    """Vectorized projection; returns (uv (..., 2), valid (...)) without raising."""
    ps = np.asarray(ps, dtype=np.float64)
    z = ps[..., 2]
    ok = z > 0
    zsafe = np.where(ok, z, 1.0)
    uv = np.empty(ps.shape[:-1] + (2,))
    uv[..., 0] = intrinsics.fx * ps[..., 0] / zsafe + intrinsics.cx
    uv[..., 1] = intrinsics.fy * ps[..., 1] / zsafe + intrinsics.cy
    uv[~ok] = 0.0
    return uv, ok


def project_jacobian(p, intrinsics):
    """2x3 Jacobian of the perspective projection at point ``p`` (z > 0)."""
    p = np.asarray(p, dtype=np.float64)
    if p[2] <= 0:
        raise BehindCameraError(f"point has non-positive depth z={p[2]}")
    x, y, z = p
    fx, fy = intrinsics.fx, intrinsics.fy
    return np.array(
        [
            [fx / z, 0.0, -fx * x / z**2],
            [0.0, fy / z, -fy * y / z**2],
        ]
    )


def project_jacobian_points(ps, intrinsics, valid=None):
    """Vectorized projection Jacobians; invalid (z <= 0) rows are zeroed."""
    ps = np.asarray(ps, dtype=np.float64)
    z = ps[..., 2]
    ok = z > 0 if valid is None else valid & (z > 0)
    zsafe = np.where(ok, z, 1.0)
    out = np.zeros(ps.shape[:-1] + (2, 3))
    out[..., 0, 0] = intrinsics.fx / zsafe
    out[..., 0, 2] = -intrinsics.fx * ps[..., 0] / zsafe**2
    out[..., 1, 1] = intrinsics.fy / zsafe
    out[..., 1, 2] = -intrinsics.fy * ps[..., 1] / zsafe**2
    out[~ok] = 0.0
    return out, ok


def _bilinear_cells(locs, width, height):
    """Cell origin and fractional offsets for bilinear interpolation.

    The cell is clipped to [0, W-2] x [0, H-2] so the right/bottom image
    border still resolves to a full 2x2 neighborhood.
    """
    x = locs[..., 0]
    y = locs[..., 1]
    inb = (x >= 0) & (x <= width - 1) & (y >= 0) & (y <= height - 1)
    x0 = np.clip(np.floor(x), 0, width - 2).astype(np.int64)
    y0 = np.clip(np.floor(y), 0, height - 2).astype(np.int64)
    fx = np.where(inb, x - x0, 0.0)
    fy = np.where(inb, y - y0, 0.0)
    return x0, y0, fx, fy, inb


def bilinear_sample_many(img, locs):
    """Bilinear sample of a PointImage at continuous locations (..., 2).

    A sample is invalid if the location leaves [0, W-1] x [0, H-1] or if any
    of the four surrounding pixels is invalid; weights are never renormalized.
    Returns (points (..., 3), valid (...)).
    """
    locs = np.asarray(locs, dtype=np.float64)
    h, w = img.valid.shape
    x0, y0, fx, fy, inb = _bilinear_cells(locs, w, h)
    x1, y1 = x0 + 1, y0 + 1

    v = (
        img.valid[y0, x0]
        & img.valid[y0, x1]
        & img.valid[y1, x0]
        & img.valid[y1, x1]
        & inb
    )
    w00 = (1 - fx) * (1 - fy)
    w10 = fx * (1 - fy)
    w01 = (1 - fx) * fy
    w11 = fx * fy
    pts = (
        img.points[y0, x0] * w00[..., None]
        + img.points[y0, x1] * w10[..., None]
        + img.points[y1, x0] * w01[..., None]
        + img.points[y1, x1] * w11[..., None]
    )
    pts = np.where(v[..., None], pts, 0.0)
    return pts, v


def bilinear_sample(img, loc):
    """Single-location bilinear sample; returns (point (3,), valid: bool)."""
    pts, v = bilinear_sample_many(img, np.asarray(loc, dtype=np.float64)[None, :])
    return pts[0], bool(v[0])


def sample_z_with_grad(img, locs):
    """Bilinear z sample of a PointImage plus its gradient w.r.t. the location.

    On exact pixel-grid lines the derivative of the left/lower cell is used.
    Returns (z (...), dz_dloc (..., 2), valid (...)).
    """
    locs = np.asarray(locs, dtype=np.float64)
    h, w = img.valid.shape
    x0, y0, fx, fy, inb = _bilinear_cells(locs, w, h)
    x1, y1 = x0 + 1, y0 + 1
    v = (
        img.valid[y0, x0]
        & img.valid[y0, x1]
        & img.valid[y1, x0]
        & img.valid[y1, x1]
        & inb
    )
    z = img.points[..., 2]
    z00, z10 = z[y0, x0], z[y0, x1]
    z01, z11 = z[y1, x0], z[y1, x1]
    zval = (
        z00 * (1 - fx) * (1 - fy)
        + z10 * fx * (1 - fy)
        + z01 * (1 - fx) * fy
        + z11 * fx * fy
    )

    # Derivative cell: identical to the value cell except on grid lines,
    # where the left/lower cell is taken.
    x = locs[..., 0]
    y = locs[..., 1]
    dx0 = np.clip(np.ceil(x) - 1, 0, w - 2).astype(np.int64)
    dy0 = np.clip(np.ceil(y) - 1, 0, h - 2).astype(np.int64)
    dfx = np.where(inb, x - dx0, 0.0)
    dfy = np.where(inb, y - dy0, 0.0)
    dx1, dy1 = dx0 + 1, dy0 + 1
    dvalid = (
        img.valid[dy0, dx0]
        & img.valid[dy0, dx1]
        & img.valid[dy1, dx0]
        & img.valid[dy1, dx1]
        & inb
    )
    d00, d10 = z[dy0, dx0], z[dy0, dx1]
    d01, d11 = z[dy1, dx0], z[dy1, dx1]
    grad = np.zeros(locs.shape[:-1] + (2,))
    grad[..., 0] = (d10 - d00) * (1 - dfy) + (d11 - d01) * dfy
    grad[..., 1] = (d01 - d00) * (1 - dfx) + (d11 - d10) * dfx
    grad[~dvalid] = 0.0

    zval = np.where(v, zval, 0.0)
    return zval, grad, v
