import numpy as np
import pytest

from monosplat.errors import PnPDegenerateError
from monosplat.geometry import Pose, Twist, rotation_angle_deg, se3_exp
from monosplat.pointmap import synth_pair
from monosplat.rasterizer import CameraIntrinsics, render
from monosplat.scene import GaussianMap, logit
from monosplat.tracking import (chain_pose, estimate_relative_pose, pnp_ransac,
                                refine_pose)


def _k(w=64, h=48, f=60.0):
    return CameraIntrinsics(f, f, (w - 1) / 2, (h - 1) / 2, w, h)


def _pose_err(a: Pose, b: Pose):
    rot = np.radians(rotation_angle_deg(a.rotation, b.rotation))
    trans = np.linalg.norm(a.translation - b.translation)
    return rot, trans


def _correspondences(n, pose, K, seed=0):
    rng = np.random.default_rng(seed)
    pts = np.stack([rng.uniform(-2, 2, n), rng.uniform(-1.5, 1.5, n),
                    rng.uniform(2.5, 9, n)], axis=1)
    world = pose.inverse().apply(pose.apply(pts))  # exact round trip, pts are world
    cam = pose.apply(pts)
    pix = np.stack([K.fx * cam[:, 0] / cam[:, 2] + K.cx,
                    K.fy * cam[:, 1] / cam[:, 2] + K.cy], axis=1)
    del world
    return pts, pix


class TestPnP:
    def test_exact_recovery(self):
        K = _k()
        true = se3_exp(Twist(np.array([0.03, -0.05, 0.02]),
                             np.array([0.2, 0.1, -0.3])))
        pts, pix = _correspondences(50, true, K, seed=1)
        pose, mask = pnp_ransac(pts, pix, K, seed=0)
        rot, trans = _pose_err(pose, true)
        assert rot < 1e-6 and trans < 1e-6
        assert mask.all()

    def test_outlier_rejection(self):
        K = _k()
        true = se3_exp(Twist(np.array([-0.02, 0.04, 0.0]),
                             np.array([0.1, -0.2, 0.25])))
        pts, pix = _correspondences(200, true, K, seed=2)
        rng = np.random.default_rng(3)
        corrupt = rng.choice(200, 60, replace=False)
        pix = pix.copy()
        pix[corrupt] = np.stack([rng.uniform(0, K.width - 1, 60),
                                 rng.uniform(0, K.height - 1, 60)], axis=1)
        pose, mask = pnp_ransac(pts, pix, K, seed=4)
        rot, trans = _pose_err(pose, true)
        assert rot < 1e-3 and trans < 1e-3
        assert np.count_nonzero(mask[corrupt]) <= 6  # >= 90% of corrupted excluded

    def test_below_minimum_raises(self):
        K = _k()
        true = Pose.identity()
        pts, pix = _correspondences(5, true, K)
        with pytest.raises(ValueError):
            pnp_ransac(pts, pix, K)

    def test_all_outliers_degenerate(self):
        K = _k()
        rng = np.random.default_rng(5)
        pts = np.stack([rng.uniform(-2, 2, 40), rng.uniform(-2, 2, 40),
                        rng.uniform(2, 8, 40)], axis=1)
        pix = np.stack([rng.uniform(0, K.width, 40),
                        rng.uniform(0, K.height, 40)], axis=1)
        with pytest.raises(PnPDegenerateError):
            pnp_ransac(pts, pix, K, seed=6)

    def test_deterministic_in_seed(self):
        K = _k()
        true = se3_exp(Twist(np.array([0.01, 0.02, -0.01]),
                             np.array([0.1, 0.05, 0.2])))
        pts, pix = _correspondences(100, true, K, seed=7)
        rng = np.random.default_rng(8)
        pix = pix + rng.normal(0, 0.5, pix.shape)
        p1, m1 = pnp_ransac(pts, pix, K, seed=11)
        p2, m2 = pnp_ransac(pts, pix, K, seed=11)
        np.testing.assert_array_equal(p1.rotation, p2.rotation)
        np.testing.assert_array_equal(p1.translation, p2.translation)
        np.testing.assert_array_equal(m1, m2)


def _scene(n=3000, seed=0):
    rng = np.random.default_rng(seed)
    pts = np.stack([rng.uniform(-3, 3, n), rng.uniform(-2, 2, n),
                    rng.uniform(2, 9, n)], axis=1)
    return pts, rng.uniform(0.1, 0.9, (n, 3))


class TestEstimateRelativePose:
    def test_identity_motion(self):
        pts, colors = _scene()
        K = _k()
        pair = synth_pair(pts, colors, Pose.identity(), Pose.identity(), K)
        est = estimate_relative_pose(pair, K, seed=0)
        rot, trans = _pose_err(est, Pose.identity())
        assert rot < 1e-6 and trans < 1e-6

    def test_pure_forward_motion(self):
        pts, colors = _scene(seed=1)
        K = _k()
        T_b = Pose(np.eye(3), np.array([0.0, 0.0, -1.0]))  # 1 unit forward
        pair = synth_pair(pts, colors, Pose.identity(), T_b, K)
        est = estimate_relative_pose(pair, K, seed=2)
        assert np.linalg.norm(est.translation - [0, 0, -1.0]) < 1e-4
        assert np.radians(rotation_angle_deg(est.rotation, np.eye(3))) < 1e-5

    def test_zero_confidence_degenerate(self):
        pts, colors = _scene()
        K = _k()
        pair = synth_pair(pts, colors, Pose.identity(), Pose.identity(), K)
        pair.conf2[:] = 0.0
        with pytest.raises(ValueError):
            estimate_relative_pose(pair, K)

    def test_scale_covariance(self):
        pts, colors = _scene(seed=3)
        K = _k()
        T_b = se3_exp(Twist(np.array([0.0, 0.04, 0.0]), np.array([0.1, 0, 0.4])))
        pair = synth_pair(pts, colors, Pose.identity(), T_b, K)
        est1 = estimate_relative_pose(pair, K, seed=5)
        from monosplat.pointmap import PointmapPair
        scaled = PointmapPair(pair.frame_a, pair.frame_b, pair.X1, pair.conf1,
                              pair.X2 * np.float32(2.0), pair.conf2)
        est2 = estimate_relative_pose(scaled, K, seed=5)
        assert np.radians(rotation_angle_deg(est1.rotation, est2.rotation)) < 1e-6
        np.testing.assert_allclose(est2.translation, 2.0 * est1.translation,
                                   rtol=1e-5, atol=1e-7)


class TestChainPose:
    def test_identity_neutral(self):
        T = se3_exp(Twist(np.array([0.1, 0, 0]), np.array([1, 2, 3.0])))
        got = chain_pose(T, Pose.identity())
        np.testing.assert_allclose(got.matrix(), T.matrix(), atol=1e-15)
        got = chain_pose(Pose.identity(), T)
        np.testing.assert_allclose(got.matrix(), T.matrix(), atol=1e-15)

    def test_matches_matrix_product(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            T1 = se3_exp(Twist(rng.normal(scale=0.4, size=3), rng.normal(size=3)))
            T2 = se3_exp(Twist(rng.normal(scale=0.4, size=3), rng.normal(size=3)))
            got = chain_pose(T1, T2)
            np.testing.assert_allclose(got.matrix(), T2.matrix() @ T1.matrix(),
                                       atol=1e-12)


def _converged_map_and_target(seed=0, n=200):
    """A map and the image it renders exactly from the ground-truth pose."""
    rng = np.random.default_rng(seed)
    K = _k(w=80, h=60, f=70.0)
    m = GaussianMap()
    pts = np.stack([rng.uniform(-2.5, 2.5, n), rng.uniform(-1.8, 1.8, n),
                    rng.uniform(2, 8, n)], axis=1)
    m.insert_from_points(pts, rng.uniform(0.1, 0.9, (n, 3)), 0)
    m.opacity_logits[:] = logit(0.95)
    m.log_scales[:] += 0.6
    m.version += 1
    T_true = se3_exp(Twist(np.array([0.0, 0.02, 0.0]), np.array([0.05, 0, 0.1])))
    target = render(m, T_true, K).color
    return m, K, T_true, target


class TestRefinePose:
    def test_exact_init_returns_input(self):
        m, K, T_true, target = _converged_map_and_target()
        res = refine_pose(m, target, T_true, K, max_iters=50)
        assert res.status == "ok"
        assert res.final_loss == 0.0
        assert res.pose is T_true

    def test_converges_from_perturbation(self):
        m, K, T_true, target = _converged_map_and_target(seed=1)
        delta = se3_exp(Twist(np.radians(0.5) * np.array([0.2, -0.9, 0.4]),
                              0.02 * np.array([-0.5, 0.6, 0.62])))
        res = refine_pose(m, target, delta.compose(T_true), K, max_iters=100)
        rot, trans = _pose_err(res.pose, T_true)
        assert res.status == "ok"
        assert np.degrees(rot) < 0.05
        assert trans < 0.005

    def test_never_worse_than_init(self):
        m, K, T_true, target = _converged_map_and_target(seed=2)
        delta = se3_exp(Twist(np.array([0.004, 0.002, -0.003]),
                              np.array([0.01, -0.015, 0.02])))
        T_init = delta.compose(T_true)
        out0 = render(m, T_init, K)
        mask = out0.alpha >= 0.1
        from monosplat.rasterizer import photometric_loss_grad
        loss0, _ = photometric_loss_grad(out0, target, mask)
        res = refine_pose(m, target, T_init, K, max_iters=40)
        assert res.final_loss <= loss0 + 1e-15

    def test_no_visible_gaussians_diverges(self):
        m, K, _, target = _converged_map_and_target(seed=3)
        # camera at the origin turned 180 degrees: the scene is behind it
        away = Pose(np.diag([1.0, -1.0, -1.0]), np.zeros(3))
        res = refine_pose(m, target, away, K, max_iters=20)
        assert res.status == "diverged"
        assert res.pose is away

    def test_empty_map_rejected(self):
        K = _k()
        with pytest.raises(ValueError):
            refine_pose(GaussianMap(), np.zeros((K.height, K.width, 3)),
                        Pose.identity(), K)
