import math

import numpy as np
import pytest

from monosplat.errors import StaleRenderError
from monosplat.geometry import Pose, Twist, se3_exp
from monosplat.rasterizer import (ALPHA_MIN, DILATION, CameraIntrinsics,
                                  backward_gaussians, photometric_loss,
                                  project_gaussian, render)
from monosplat.scene import Gaussian3D, GaussianMap, logit


def _k(fx=100.0, fy=100.0, cx=160.0, cy=120.0, w=320, h=240):
    return CameraIntrinsics(fx, fy, cx, cy, w, h)


def _gaussian(mean, log_scale=-2.0, opacity=0.9, color=(1.0, 0.0, 0.0)):
    return Gaussian3D(np.asarray(mean, dtype=float), np.array([1.0, 0, 0, 0]),
                      np.full(3, float(log_scale)), logit(opacity),
                      np.asarray(color, dtype=float))


def _map_of(means, colors, opacities, log_scale=-2.0):
    m = GaussianMap()
    m.insert_from_points(means, colors, 0)
    m.opacity_logits[:] = [logit(o) for o in opacities]
    m.log_scales[:] = log_scale
    m.version += 1
    return m


class TestProjection:
    def test_optical_axis_center(self):
        s = project_gaussian(_gaussian([0, 0, 2.0]), Pose.identity(), _k())
        np.testing.assert_allclose(s.mean2d, [160.0, 120.0], atol=1e-12)
        assert abs(s.depth - 2.0) < 1e-12

    def test_on_axis_covariance(self):
        # fx/z = 50, J = [[50,0,0],[0,50,0]]: Sigma_I = 2500 I + dilation.
        s = project_gaussian(_gaussian([0, 0, 2.0], log_scale=0.0),
                             Pose.identity(), _k())
        np.testing.assert_allclose(s.cov2d, 2500.0 * np.eye(2) + DILATION * np.eye(2),
                                   atol=1e-9)

    def test_behind_camera_culled(self):
        assert project_gaussian(_gaussian([0, 0, -1.0]), Pose.identity(), _k()) is None

    def test_far_off_image_culled(self):
        assert project_gaussian(_gaussian([50.0, 0, 2.0]), Pose.identity(), _k()) is None

    def test_cov2d_eigenvalues_floored(self):
        s = project_gaussian(_gaussian([0.3, -0.2, 3.0], log_scale=-6.0),
                             Pose.identity(), _k())
        assert np.linalg.eigvalsh(s.cov2d).min() >= DILATION - 1e-12

    def test_culling_soundness(self):
        # A culled (but in-front) gaussian would contribute < 1/255 everywhere.
        rng = np.random.default_rng(0)
        K = _k(w=64, h=48, cx=31.5, cy=23.5)
        checked = 0
        while checked < 20:
            g = _gaussian(rng.uniform([-6, -6, 0.5], [6, 6, 4.0]),
                          log_scale=rng.uniform(-3.5, -1.0),
                          opacity=rng.uniform(0.05, 0.99))
            if project_gaussian(g, Pose.identity(), K) is not None:
                continue
            mu_c = g.mean
            if mu_c[2] < 0.2:
                continue
            checked += 1
            u = K.fx * mu_c[0] / mu_c[2] + K.cx
            v = K.fy * mu_c[1] / mu_c[2] + K.cy
            J = np.array([[K.fx / mu_c[2], 0, -K.fx * mu_c[0] / mu_c[2] ** 2],
                          [0, K.fy / mu_c[2], -K.fy * mu_c[1] / mu_c[2] ** 2]])
            cov = J @ g.covariance() @ J.T + DILATION * np.eye(2)
            inv = np.linalg.inv(cov)
            xs, ys = np.meshgrid(np.arange(K.width), np.arange(K.height))
            d = np.stack([xs - u, ys - v], axis=-1)
            sigma = np.einsum("hwi,ij,hwj->hw", d, inv, d)
            alpha = g.opacity * np.exp(-0.5 * sigma)
            assert alpha.max() < 1.0 / 255.0

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(12)
        K = _k(w=96, h=64, cx=47.5, cy=31.5)
        m = GaussianMap()
        pts = np.stack([rng.uniform(-2, 2, 30), rng.uniform(-1.5, 1.5, 30),
                        rng.uniform(0.5, 8, 30)], axis=1)
        m.insert_from_points(pts, rng.uniform(0, 1, (30, 3)), 0)
        m.log_scales[:] = rng.uniform(-3, -0.5, (30, 3))
        m.quats[:] = rng.normal(size=(30, 4))
        m.opacity_logits[:] = rng.uniform(-2, 2, 30)
        m.version += 1
        T = se3_exp(Twist(rng.normal(scale=0.05, size=3),
                          rng.normal(scale=0.1, size=3)))
        out = render(m, T, K)
        rendered = set(out._idx.tolist()) if out._idx is not None else set()
        for i in range(30):
            s = project_gaussian(m.get(i), T, K, source_idx=i)
            if s is None:
                assert i not in rendered
            else:
                j = np.nonzero(out._idx == i)[0]
                assert j.size == 1
                np.testing.assert_allclose(out._mean2d[j[0]], s.mean2d, rtol=1e-12)


class TestRender:
    def test_empty_map(self):
        out = render(GaussianMap(), Pose.identity(), _k(w=32, h=24),
                     background=(0.2, 0.4, 0.6))
        np.testing.assert_allclose(out.color[..., 0], 0.2)
        np.testing.assert_allclose(out.color[..., 1], 0.4)
        np.testing.assert_allclose(out.color[..., 2], 0.6)
        np.testing.assert_allclose(out.alpha, 0.0)

    def test_two_splat_compositing_closed_form(self):
        K = _k(fx=50, fy=50, cx=16.0, cy=12.0, w=32, h=24)
        red, blue = [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]
        m = _map_of([[0, 0, 2.0], [0, 0, 4.0]], [red, blue], [0.6, 0.8],
                    log_scale=1.0)
        out = render(m, Pose.identity(), K, background=(0.0, 0.0, 0.0))
        a1 = m.opacities[0]   # sigma = 0 exactly at the projected center pixel
        a2 = m.opacities[1]
        w1 = a1
        w2 = a2 * (1.0 - a1)
        expected = np.array(red) * w1 + np.array(blue) * w2
        got = out.color[12, 16]
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_opaque_gaussian_dominates_pixel(self):
        K = _k(fx=200, fy=200, cx=16.0, cy=12.0, w=32, h=24)
        m = _map_of([[0, 0, 1.0]], [[0.3, 0.9, 0.1]], [0.9999], log_scale=-1.0)
        out = render(m, Pose.identity(), K)
        np.testing.assert_allclose(out.color[12, 16], [0.3, 0.9, 0.1], atol=1e-3)

    def test_compositing_conservation(self):
        rng = np.random.default_rng(3)
        for trial in range(10):
            n = 30
            m = GaussianMap()
            pts = np.stack([rng.uniform(-1, 1, n), rng.uniform(-0.8, 0.8, n),
                            rng.uniform(0.5, 6, n)], axis=1)
            m.insert_from_points(pts, rng.uniform(0, 1, (n, 3)), 0)
            m.log_scales[:] = rng.uniform(-3, 0, (n, 3))
            m.quats[:] = rng.normal(size=(n, 4))
            m.opacity_logits[:] = rng.uniform(-3, 5, n)
            m.version += 1
            K = _k(w=48, h=36, cx=23.5, cy=17.5, fx=40, fy=40)
            out = render(m, Pose.identity(), K)
            np.testing.assert_allclose(out.alpha + out.transmittance, 1.0,
                                       atol=1e-6)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(8)
        n = 25
        pts = np.stack([rng.uniform(-1, 1, n), rng.uniform(-0.8, 0.8, n),
                        rng.uniform(1, 6, n)], axis=1)
        colors = rng.uniform(0, 1, (n, 3))
        opac = rng.uniform(-1, 2, n)
        scales = rng.uniform(-2.5, -0.5, (n, 3))
        K = _k(w=64, h=48, cx=31.5, cy=23.5, fx=60, fy=60)

        def build(order):
            m = GaussianMap()
            m.insert_from_points(pts[order], colors[order], 0)
            m.log_scales[:] = scales[order]
            m.opacity_logits[:] = opac[order]
            m.version += 1
            return render(m, Pose.identity(), K)

        a = build(np.arange(n))
        b = build(rng.permutation(n))
        np.testing.assert_array_equal(a.color, b.color)
        np.testing.assert_array_equal(a.alpha, b.alpha)

    def test_repeat_render_bit_identical(self):
        rng = np.random.default_rng(21)
        m = GaussianMap()
        pts = np.stack([rng.uniform(-1, 1, 40), rng.uniform(-1, 1, 40),
                        rng.uniform(1, 5, 40)], axis=1)
        m.insert_from_points(pts, rng.uniform(0, 1, (40, 3)), 0)
        K = _k(w=80, h=60, cx=39.5, cy=29.5)
        a = render(m, Pose.identity(), K)
        b = render(m, Pose.identity(), K)
        np.testing.assert_array_equal(a.color, b.color)

    def test_expected_depth(self):
        K = _k(fx=50, fy=50, cx=16.0, cy=12.0, w=32, h=24)
        m = _map_of([[0, 0, 2.0]], [[1, 1, 1]], [0.95], log_scale=0.5)
        out = render(m, Pose.identity(), K)
        assert abs(out.depth[12, 16] - 2.0) < 1e-9


class TestPhotometricLoss:
    def _render_simple(self):
        K = _k(w=10, h=10, cx=4.5, cy=4.5, fx=20, fy=20)
        m = _map_of([[0, 0, 2.0]], [[0.5, 0.5, 0.5]], [0.9])
        return render(m, Pose.identity(), K)

    def test_zero_on_identical(self):
        out = self._render_simple()
        assert photometric_loss(out, out.color.copy()) == 0.0

    def test_constant_offset(self):
        out = self._render_simple()
        target = np.clip(out.color + 0.1, 0, None)
        assert abs(photometric_loss(out, out.color + 0.1) - 0.1) < 1e-12
        del target

    def test_single_pixel_normalization(self):
        out = self._render_simple()
        target = out.color.copy()
        target[3, 7, 1] += 0.3
        assert abs(photometric_loss(out, target) - 0.3 / 300.0) < 1e-15

    def test_dimension_mismatch(self):
        out = self._render_simple()
        with pytest.raises(ValueError):
            photometric_loss(out, np.zeros((5, 5, 3)))


def test_backward_rejects_stale_records():
    m = _map_of([[0, 0, 2.0]], [[1, 0, 0]], [0.9])
    K = _k(w=16, h=12, cx=7.5, cy=5.5, fx=20, fy=20)
    out = render(m, Pose.identity(), K)
    m.insert_from_points([[1, 1, 3.0]], [[0, 1, 0]], 1)
    with pytest.raises(StaleRenderError):
        backward_gaussians(out, np.zeros_like(out.color))
