"""Geometry tests: pinhole pair, projection Jacobian, bilinear sampling.

Expected values are hand-computed from the pinhole formulas; the Jacobian
is checked against a central finite-difference oracle.
"""

import numpy as np
import pytest

from nrtrack.errors import BehindCameraError, InvalidInputError
from nrtrack.geometry import (
    CameraIntrinsics,
    DepthImage,
    PointImage,
    backproject,
    bilinear_sample,
    bilinear_sample_many,
    point_image_from_depth,
    project,
    project_jacobian,
    sample_z_with_grad,
)

C = CameraIntrinsics(500.0, 500.0, 320.0, 240.0)


class TestIntrinsics:
    def test_rejects_nonpositive_focal(self):
        with pytest.raises(InvalidInputError):
            CameraIntrinsics(0.0, 500.0, 320.0, 240.0)
        with pytest.raises(InvalidInputError):
            CameraIntrinsics(500.0, -1.0, 320.0, 240.0)

    def test_rejects_nonfinite(self):
        with pytest.raises(InvalidInputError):
            CameraIntrinsics(500.0, 500.0, np.nan, 240.0)


class TestBackproject:
    def test_principal_point_ray(self):
        np.testing.assert_allclose(backproject((320, 240), 2.0, C), [0, 0, 2])

    def test_off_axis_pixel(self):
        # (420-320)*2/500 = 0.4
        np.testing.assert_allclose(backproject((420, 240), 2.0, C), [0.4, 0, 2])

    def test_rejects_bad_depth(self):
        for d in (0.0, -1.0, np.nan, np.inf):
            with pytest.raises(InvalidInputError):
                backproject((10, 10), d, C)

    def test_project_backproject_roundtrip(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            u = rng.uniform(0, 640, size=2)
            d = rng.uniform(0.2, 5.0)
            p = backproject(u, d, C)
            np.testing.assert_allclose(project(p, C), u, atol=1e-9)


class TestProject:
    def test_optical_axis(self):
        np.testing.assert_allclose(project((0, 0, 1), C), [320, 240])

    def test_direct_value(self):
        # 500*0.4/2 + 320 = 420
        np.testing.assert_allclose(project((0.4, 0, 2), C), [420, 240])

    def test_behind_camera(self):
        with pytest.raises(BehindCameraError):
            project((0, 0, 0), C)
        with pytest.raises(BehindCameraError):
            project((0.1, 0.1, -0.5), C)


class TestProjectJacobian:
    def test_unit_depth_on_axis(self):
        cj = CameraIntrinsics(1.0, 1.0, 0.0, 0.0)
        np.testing.assert_allclose(
            project_jacobian((0, 0, 1), cj), [[1, 0, 0], [0, 1, 0]]
        )

    def test_matches_finite_differences(self):
        p = np.array([0.3, -0.2, 1.5])
        jac = project_jacobian(p, C)
        h = 1e-6 * (1 + np.linalg.norm(p))
        fd = np.zeros((2, 3))
        for a in range(3):
            dp = np.zeros(3)
            dp[a] = h
            fd[:, a] = (project(p + dp, C) - project(p - dp, C)) / (2 * h)
        np.testing.assert_allclose(jac, fd, rtol=1e-6)

    def test_fd_oracle_random_points(self):
        # 1000 random points with z in [0.2, 5]; relative error < 1e-5.
        rng = np.random.default_rng(7)
        for _ in range(1000):
            p = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.2, 5)])
            jac = project_jacobian(p, C)
            h = 1e-6 * (1 + np.linalg.norm(p))
            fd = np.zeros((2, 3))
            for a in range(3):
                dp = np.zeros(3)
                dp[a] = h
                fd[:, a] = (project(p + dp, C) - project(p - dp, C)) / (2 * h)
            scale = np.abs(jac).max()
            assert np.abs(jac - fd).max() <= 1e-5 * scale

    def test_row_scaling_in_fx(self):
        p = (0.2, 0.1, 1.7)
        j1 = project_jacobian(p, CameraIntrinsics(400.0, 500.0, 320.0, 240.0))
        j2 = project_jacobian(p, CameraIntrinsics(800.0, 500.0, 320.0, 240.0))
        np.testing.assert_array_equal(j2[0], 2.0 * j1[0])
        np.testing.assert_array_equal(j2[1], j1[1])

    def test_behind_camera(self):
        with pytest.raises(BehindCameraError):
            project_jacobian((0, 0, -1), C)


def _grid_image(w=6, h=5):
    pts = np.zeros((h, w, 3))
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    pts[..., 0] = xs * 0.1
    pts[..., 1] = ys * 0.2
    pts[..., 2] = 1.0 + 0.05 * xs + 0.02 * ys
    return PointImage(pts, np.ones((h, w), dtype=bool))


class TestBilinearSample:
    def test_integer_identity(self):
        img = _grid_image()
        p, ok = bilinear_sample(img, (3.0, 2.0))
        assert ok
        np.testing.assert_allclose(p, img.points[2, 3])

    def test_midpoint_mean(self):
        img = _grid_image()
        p, ok = bilinear_sample(img, (2.5, 1.0))
        assert ok
        np.testing.assert_allclose(p, 0.5 * (img.points[1, 2] + img.points[1, 3]))

    def test_out_of_bounds_invalid(self):
        img = _grid_image()
        _, ok = bilinear_sample(img, (-0.5, 3.0))
        assert not ok
        _, ok = bilinear_sample(img, (5.01, 3.0))
        assert not ok

    def test_invalid_neighbor_invalidates(self):
        img = _grid_image()
        img.valid[2, 3] = False
        _, ok = bilinear_sample(img, (2.5, 1.5))
        assert not ok

    def test_right_border_is_inside(self):
        img = _grid_image(w=6, h=5)
        p, ok = bilinear_sample(img, (5.0, 4.0))
        assert ok
        np.testing.assert_allclose(p, img.points[4, 5])

    def test_affine_along_grid_line(self):
        img = _grid_image()
        # Points are affine in x, so sampling must reproduce them exactly.
        for t in np.linspace(0, 1, 7):
            p, ok = bilinear_sample(img, (1 + t, 2.0))
            assert ok
            expected = (1 - t) * img.points[2, 1] + t * img.points[2, 2]
            np.testing.assert_allclose(p, expected, atol=1e-12)


class TestSampleZGrad:
    def test_gradient_matches_fd_inside_cell(self):
        img = _grid_image()
        rng = np.random.default_rng(3)
        locs = np.stack(
            [rng.uniform(0.6, 4.4, size=50), rng.uniform(0.6, 3.4, size=50)], axis=1
        )
        z, g, ok = sample_z_with_grad(img, locs)
        assert ok.all()
        h = 1e-7
        for i, loc in enumerate(locs):
            if min(loc[0] % 1, 1 - loc[0] % 1, loc[1] % 1, 1 - loc[1] % 1) < 1e-3:
                continue
            for a in range(2):
                dp = np.zeros(2)
                dp[a] = h
                zp, _, _ = sample_z_with_grad(img, (loc + dp)[None])
                zm, _, _ = sample_z_with_grad(img, (loc - dp)[None])
                fd = (zp[0] - zm[0]) / (2 * h)
                assert abs(fd - g[i, a]) < 1e-6

    def test_grid_line_uses_lower_cell(self):
        img = _grid_image()
        # d z / d y jumps across y = 2; exactly on the line the lower cell
        # (y in [1, 2]) applies.
        _, g_on, _ = sample_z_with_grad(img, np.array([[2.5, 2.0]]))
        _, g_below, _ = sample_z_with_grad(img, np.array([[2.5, 1.999999]]))
        np.testing.assert_allclose(g_on[0], g_below[0], atol=1e-5)


class TestImageContainers:
    def test_depth_from_array_masks_zeros(self):
        d = np.array([[0.0, 1.0], [np.nan, 2.0]])
        img = DepthImage.from_depth(d)
        np.testing.assert_array_equal(img.valid, [[False, True], [False, True]])

    def test_point_image_matches_backproject(self):
        d = np.zeros((4, 6))
        d[1, 2] = 1.7
        d[3, 5] = 0.9
        img = DepthImage.from_depth(d)
        pts = point_image_from_depth(img, C)
        np.testing.assert_allclose(pts.points[1, 2], backproject((2, 1), 1.7, C))
        np.testing.assert_allclose(pts.points[3, 5], backproject((5, 3), 0.9, C))
        assert pts.valid.sum() == 2

    def test_vectorized_matches_scalar(self):
        img = _grid_image()
        locs = np.array([[1.3, 2.7], [0.0, 0.0], [5.0, 4.0]])
        pts, ok = bilinear_sample_many(img, locs)
        for i in range(len(locs)):
            p, o = bilinear_sample(img, locs[i])
            assert o == ok[i]
            np.testing.assert_allclose(p, pts[i])
