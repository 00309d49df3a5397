"""Rotation parameterization and warp operator tests.

scipy.spatial.transform.Rotation serves as the independent Rodrigues oracle;
the right-Jacobian convention and the increment backward helpers are checked
by finite differences.
"""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from nrtrack.errors import SolverDivergenceError, UnsupportedPointError
from nrtrack.graphbuild import SkinningTable
from nrtrack.geometry import PointImage
from nrtrack.warpfield import (
    GraphMotion,
    apply_increment,
    exp_so3,
    exp_so3_many,
    hat,
    hat_many,
    rigid_node_motion,
    so3_right_jacobian,
    vee_contract,
    warp_cloud,
    warp_point,
    warp_points,
)


class TestHat:
    def test_definition(self):
        np.testing.assert_array_equal(
            hat((1, 2, 3)), [[0, -3, 2], [3, 0, -1], [-2, 1, 0]]
        )

    def test_skew_symmetry_and_cross(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            w = rng.normal(size=3)
            x = rng.normal(size=3)
            m = hat(w)
            np.testing.assert_allclose(m.T, -m)
            np.testing.assert_allclose(m @ x, np.cross(w, x), atol=1e-15)
            np.testing.assert_allclose(m @ w, 0, atol=1e-15)

    def test_vee_contract_adjoint(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            m = rng.normal(size=(3, 3))
            x = rng.normal(size=3)
            assert np.isclose(np.sum(m * hat(x)), vee_contract(m) @ x)


class TestExpSo3:
    def test_zero_is_identity(self):
        np.testing.assert_array_equal(exp_so3((0, 0, 0)), np.eye(3))

    def test_quarter_turn(self):
        r = exp_so3((0, 0, np.pi / 2))
        np.testing.assert_allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-12)

    def test_matches_scipy_rotation_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            w = rng.normal(size=3) * rng.uniform(0, np.pi)
            np.testing.assert_allclose(
                exp_so3(w), Rotation.from_rotvec(w).as_matrix(), atol=1e-12
            )

    def test_inverse(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            w = rng.normal(size=3)
            np.testing.assert_allclose(
                exp_so3(w) @ exp_so3(-w), np.eye(3), atol=1e-12
            )

    def test_orthonormal_det_one(self):
        rng = np.random.default_rng(4)
        ws = rng.normal(size=(200, 3))
        ws *= (rng.uniform(0, np.pi, 200) / np.linalg.norm(ws, axis=1))[:, None]
        rs = exp_so3_many(ws)
        rtr = np.einsum("nji,njk->nik", rs, rs)
        assert np.abs(rtr - np.eye(3)).max() < 1e-12
        assert np.abs(np.linalg.det(rs) - 1).max() < 1e-12

    def test_small_angle_branch(self):
        w = np.array([1e-9, -2e-9, 0.5e-9])
        np.testing.assert_allclose(
            exp_so3(w), Rotation.from_rotvec(w).as_matrix(), atol=1e-16
        )


class TestRightJacobian:
    def test_convention(self):
        # exp(w + d) ~= exp(w) exp(Jr(w) d) to first order.
        rng = np.random.default_rng(5)
        for _ in range(30):
            w = rng.normal(size=3)
            d = rng.normal(size=3) * 1e-6
            lhs = exp_so3(w + d)
            rhs = exp_so3(w) @ exp_so3(so3_right_jacobian(w) @ d)
            np.testing.assert_allclose(lhs, rhs, atol=1e-11)

    def test_small_angle_branch_matches_exact(self):
        # Just below the Taylor switch the series must agree with the exact
        # coefficients evaluated directly.
        w = np.array([7e-5, -5e-5, 3e-5])
        theta = np.linalg.norm(w)
        k = hat(w)
        exact = (
            np.eye(3)
            - (1 - np.cos(theta)) / theta**2 * k
            + (theta - np.sin(theta)) / theta**3 * (k @ k)
        )
        np.testing.assert_allclose(so3_right_jacobian(w), exact, atol=1e-14)


def _single_node_setup(node, rot=np.eye(3), trans=np.zeros(3)):
    motion = GraphMotion(rot[None].copy(), np.array([trans], dtype=np.float64))
    return np.asarray(node, dtype=np.float64)[None, :], motion


class TestWarpPoint:
    def test_identity(self):
        nodes, motion = _single_node_setup([0.2, 0.1, 1.0])
        p = np.array([0.3, 0.0, 1.1])
        np.testing.assert_allclose(
            warp_point(p, nodes, [0], [1.0], motion), p, atol=1e-15
        )

    def test_pure_translation(self):
        nodes, motion = _single_node_setup([0, 0, 1], trans=np.array([0.1, 0, 0]))
        p = np.array([0.05, 0.02, 1.0])
        np.testing.assert_allclose(
            warp_point(p, nodes, [0], [1.0], motion), p + [0.1, 0, 0]
        )

    def test_rotation_about_node(self):
        # omega = pi/2 about z as pending delta on an identity rotation.
        nodes = np.array([[0.0, 0.0, 1.0]])
        motion = GraphMotion(
            np.eye(3)[None].copy(), np.zeros((1, 3)),
            omega=np.array([[0, 0, np.pi / 2]]),
        )
        out = warp_point([0.1, 0, 1.0], nodes, [0], [1.0], motion)
        np.testing.assert_allclose(out, [0, 0.1, 1.0], atol=1e-12)

    def test_unsupported_raises(self):
        nodes, motion = _single_node_setup([0, 0, 1])
        with pytest.raises(UnsupportedPointError):
            warp_point([0, 0, 1], nodes, [-1], [0.0], motion)

    def test_linear_in_translation(self):
        rng = np.random.default_rng(6)
        nodes = rng.normal(size=(3, 3))
        anchors = np.array([0, 1, 2])
        weights = np.array([0.5, 0.3, 0.2])
        rot = exp_so3_many(rng.normal(size=(3, 3)) * 0.3)
        p = rng.normal(size=3)
        t1 = rng.normal(size=(3, 3))
        t2 = rng.normal(size=(3, 3))
        w1 = warp_point(p, nodes, anchors, weights, GraphMotion(rot, t1))
        w2 = warp_point(p, nodes, anchors, weights, GraphMotion(rot, t2))
        w12 = warp_point(p, nodes, anchors, weights, GraphMotion(rot, t1 + t2))
        w0 = warp_point(p, nodes, anchors, weights, GraphMotion(rot, np.zeros((3, 3))))
        np.testing.assert_allclose(w12, w1 + w2 - w0, atol=1e-12)


class TestGlobalRigidExactness:
    def test_warp_equals_rigid_transform(self):
        rng = np.random.default_rng(7)
        nodes = rng.uniform(-0.3, 0.3, size=(12, 3)) + [0, 0, 1.5]
        rot = exp_so3(rng.normal(size=3) * 0.4)
        trans = rng.uniform(-0.1, 0.1, size=3)
        motion = rigid_node_motion(nodes, rot, trans)
        for _ in range(50):
            p = rng.uniform(-0.3, 0.3, size=3) + [0, 0, 1.5]
            anchors = rng.choice(12, size=4, replace=False)
            w = rng.uniform(0.1, 1.0, size=4)
            w /= w.sum()
            got = warp_point(p, nodes, anchors, w, motion)
            np.testing.assert_allclose(got, rot @ p + trans, atol=1e-9)


class TestApplyIncrement:
    def test_zero_delta_is_noop(self):
        rng = np.random.default_rng(8)
        motion = GraphMotion(exp_so3_many(rng.normal(size=(4, 3))),
                             rng.normal(size=(4, 3)))
        out = apply_increment(motion, np.zeros((4, 3)), np.zeros((4, 3)))
        np.testing.assert_allclose(out.rotations, motion.rotations, atol=1e-15)
        np.testing.assert_allclose(out.translations, motion.translations)

    def test_two_quarter_steps_compose(self):
        motion = GraphMotion.identity(1)
        inc = np.array([[0, 0, np.pi / 4]])
        motion = apply_increment(motion, inc, np.zeros((1, 3)))
        motion = apply_increment(motion, inc, np.zeros((1, 3)))
        np.testing.assert_allclose(
            motion.rotations[0], exp_so3((0, 0, np.pi / 2)), atol=1e-12
        )

    def test_nonfinite_raises(self):
        motion = GraphMotion.identity(2)
        bad = np.zeros((2, 3))
        bad[1, 1] = np.nan
        with pytest.raises(SolverDivergenceError):
            apply_increment(motion, bad, np.zeros((2, 3)))

    def test_orthonormal_after_many_random_increments(self):
        rng = np.random.default_rng(9)
        motion = GraphMotion.identity(3)
        for _ in range(1000):
            motion = apply_increment(
                motion, rng.normal(size=(3, 3)) * 0.1, rng.normal(size=(3, 3)) * 0.01
            )
        assert motion.orthonormality_drift() < 1e-6

    def test_resets_pending_omega(self):
        motion = GraphMotion(np.eye(3)[None].copy(), np.zeros((1, 3)),
                             omega=np.array([[0.1, 0, 0]]))
        out = apply_increment(motion, np.zeros((1, 3)), np.zeros((1, 3)))
        np.testing.assert_array_equal(out.omega, 0)


class TestWarpCloud:
    def _cloud(self):
        rng = np.random.default_rng(10)
        h, w = 6, 8
        pts = rng.uniform(-0.2, 0.2, size=(h, w, 3)) + [0, 0, 1.4]
        valid = np.ones((h, w), dtype=bool)
        valid[0, 0] = False
        img = PointImage(pts, valid)
        nodes = rng.uniform(-0.2, 0.2, size=(5, 3)) + [0, 0, 1.4]
        anchors = rng.integers(0, 5, size=(h, w, 4)).astype(np.int32)
        weights = rng.uniform(0.1, 1, size=(h, w, 4))
        weights /= weights.sum(axis=-1, keepdims=True)
        anchors[1, 1] = -1  # unsupported pixel
        weights[1, 1] = 0.0

        class G:
            pass

        g = G()
        g.nodes = nodes
        return img, g, SkinningTable(anchors, weights)

    def test_identity_motion(self):
        img, g, skin = self._cloud()
        out = warp_cloud(img, g, skin, GraphMotion.identity(5))
        mask = out.valid
        np.testing.assert_allclose(out.points[mask], img.points[mask], atol=1e-14)
        assert not out.valid[0, 0]
        assert not out.valid[1, 1]

    def test_global_rigid_motion(self):
        img, g, skin = self._cloud()
        rot = exp_so3((0.1, -0.2, 0.3))
        trans = np.array([0.02, 0.01, -0.03])
        motion = rigid_node_motion(g.nodes, rot, trans)
        out = warp_cloud(img, g, skin, motion)
        expected = img.points @ rot.T + trans
        np.testing.assert_allclose(out.points[out.valid], expected[out.valid],
                                   atol=1e-9)

    def test_all_invalid_in_all_invalid_out(self):
        img, g, skin = self._cloud()
        img.valid[:] = False
        out = warp_cloud(img, g, skin, GraphMotion.identity(5))
        assert not out.valid.any()

    def test_warp_points_vector_matches_scalar(self):
        img, g, skin = self._cloud()
        rng = np.random.default_rng(11)
        motion = GraphMotion(exp_so3_many(rng.normal(size=(5, 3)) * 0.2),
                             rng.normal(size=(5, 3)) * 0.05)
        pts = img.points.reshape(-1, 3)[5:9]
        anchors = skin.anchors.reshape(-1, 4)[5:9]
        weights = skin.weights.reshape(-1, 4)[5:9]
        out = warp_points(pts, g.nodes, anchors, weights, motion)
        for i in range(4):
            np.testing.assert_allclose(
                out[i], warp_point(pts[i], g.nodes, anchors[i], weights[i], motion),
                atol=1e-14,
            )


class TestHatMany:
    def test_matches_scalar(self):
        rng = np.random.default_rng(12)
        ws = rng.normal(size=(7, 3))
        hs = hat_many(ws)
        for i in range(7):
            np.testing.assert_array_equal(hs[i], hat(ws[i]))
