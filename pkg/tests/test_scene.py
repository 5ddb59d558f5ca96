import math

import numpy as np
import pytest

from monosplat.errors import FormatError
from monosplat.geometry import quat_to_rot
from monosplat.scene import (Gaussian3D, GaussianMap, covariance_from_params,
                             eval_gaussian, logit, sigmoid)


def _gaussian(mean=(0, 0, 0), rot=(1, 0, 0, 0), log_scale=(0, 0, 0),
              opacity_logit=0.0, color=(0.5, 0.5, 0.5)):
    return Gaussian3D(np.array(mean, dtype=float), np.array(rot, dtype=float),
                      np.array(log_scale, dtype=float), float(opacity_logit),
                      np.array(color, dtype=float))


class TestCovariance:
    def test_identity_params(self):
        np.testing.assert_allclose(
            covariance_from_params([1, 0, 0, 0], [0, 0, 0]), np.eye(3), atol=1e-15)

    def test_axis_scaling(self):
        cov = covariance_from_params([1, 0, 0, 0], [math.log(2), 0, 0])
        np.testing.assert_allclose(cov, np.diag([4.0, 1.0, 1.0]), atol=1e-12)

    def test_rotated_scaling(self):
        c = math.cos(math.pi / 4)
        cov = covariance_from_params([c, 0, 0, math.sin(math.pi / 4)],
                                     [math.log(2), 0, 0])
        np.testing.assert_allclose(cov, np.diag([1.0, 4.0, 1.0]), atol=1e-12)

    def test_eigenvalues_are_squared_scales(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            q = rng.normal(size=4)
            ls = rng.uniform(-2, 1, 3)
            cov = covariance_from_params(q, ls)
            eig = np.sort(np.linalg.eigvalsh(cov))
            expected = np.sort(np.exp(ls) ** 2)
            np.testing.assert_allclose(eig, expected, rtol=1e-9)

    def test_symmetric_psd(self):
        cov = covariance_from_params([0.3, 0.5, -0.2, 0.8], [-1.0, 0.5, 0.0])
        np.testing.assert_allclose(cov, cov.T, atol=1e-14)
        assert np.linalg.eigvalsh(cov).min() > 0


class TestEvalGaussian:
    def test_at_mean(self):
        assert eval_gaussian(_gaussian(mean=(1, 2, 3)), [1, 2, 3]) == 1.0

    def test_unit_distance_isotropic(self):
        g = _gaussian()
        assert abs(eval_gaussian(g, [1, 0, 0]) - math.exp(-0.5)) < 1e-12

    def test_mahalanobis_distance_one(self):
        g = _gaussian(log_scale=(math.log(2), 0, 0))
        assert abs(eval_gaussian(g, [2, 0, 0]) - math.exp(-0.5)) < 1e-12

    def test_rotation_invariance(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            q = rng.normal(size=4)
            qg = rng.normal(size=4)
            ls = rng.uniform(-1, 0.5, 3)
            x = rng.normal(size=3)
            R = quat_to_rot(q)
            g = _gaussian(rot=qg, log_scale=ls)
            # rotate both the offset and the gaussian orientation
            from monosplat.geometry import rot_to_quat
            g_rot = _gaussian(rot=rot_to_quat(R @ quat_to_rot(qg)), log_scale=ls)
            v1 = eval_gaussian(g, x)
            v2 = eval_gaussian(g_rot, R @ x)
            assert abs(v1 - v2) < 1e-9


class TestInsert:
    def test_empty_input(self):
        m = GaussianMap()
        assert m.insert_from_points(np.zeros((0, 3)), np.zeros((0, 3)), 0) == 0
        assert len(m) == 0

    def test_length_mismatch(self):
        m = GaussianMap()
        with pytest.raises(ValueError):
            m.insert_from_points(np.zeros((2, 3)), np.zeros((3, 3)), 0)

    def test_single_point_fallback_scale(self):
        m = GaussianMap()
        m.insert_from_points([[0, 0, 1.0]], [[1, 0, 0]], 0)
        np.testing.assert_allclose(np.exp(m.log_scales[0]), 0.01, rtol=1e-12)

    def test_grid_scale_is_spacing(self):
        d = 0.25
        xs, ys, zs = np.meshgrid(np.arange(5), np.arange(5), np.arange(4),
                                 indexing="ij")
        pts = d * np.stack([xs, ys, zs], axis=-1).reshape(-1, 3)
        assert pts.shape[0] == 100
        m = GaussianMap()
        m.insert_from_points(pts, np.full((100, 3), 0.5), 0)
        np.testing.assert_allclose(m.log_scales, math.log(d), atol=1e-9)

    def test_nonfinite_points_skipped(self):
        m = GaussianMap()
        pts = np.array([[0, 0, 1.0], [np.nan, 0, 1.0], [0, 1, 1.0]])
        inserted = m.insert_from_points(pts, np.full((3, 3), 0.5), 0)
        assert inserted == 2
        assert m.skipped_nonfinite == 1

    def test_initial_opacity_is_half(self):
        m = GaussianMap()
        m.insert_from_points([[0, 0, 1.0], [1, 0, 1.0]], np.full((2, 3), 0.5), 0)
        np.testing.assert_allclose(sigmoid(m.opacity_logits), 0.5, atol=1e-12)

    def test_buffers_match_length(self):
        m = GaussianMap()
        m.insert_from_points(np.random.default_rng(0).normal(size=(7, 3)),
                             np.full((7, 3), 0.5), 2)
        for key in ("means", "quats", "log_scales", "opacity_logits", "colors"):
            assert m.grads[key].shape == getattr(m, key).shape
            assert m.adam_m[key].shape == getattr(m, key).shape
            assert m.adam_v[key].shape == getattr(m, key).shape


class TestPrune:
    def _map_with_opacities(self, opacities, created_at=0):
        m = GaussianMap()
        n = len(opacities)
        m.insert_from_points(np.arange(n * 3, dtype=float).reshape(n, 3) * 0.1,
                             np.full((n, 3), 0.5), created_at)
        m.opacity_logits[:] = [logit(o) for o in opacities]
        return m

    def test_no_removal_above_threshold(self):
        m = self._map_with_opacities([0.5, 0.06, 0.9])
        assert m.prune(current_kf=10) == 0

    def test_removes_aged_weak(self):
        m = self._map_with_opacities([0.01, 0.5], created_at=0)
        assert m.prune(current_kf=5) == 1
        assert len(m) == 1
        assert sigmoid(m.opacity_logits[0]) > 0.4

    def test_grace_period(self):
        m = self._map_with_opacities([0.01], created_at=4)
        assert m.prune(current_kf=5) == 0

    def test_nonfinite_always_removed(self):
        m = self._map_with_opacities([0.5, 0.5], created_at=5)
        m.means[0, 0] = np.nan
        assert m.prune(current_kf=5) == 1
        assert np.all(np.isfinite(m.means))

    def test_insert_prune_sequence_keeps_buffers_consistent(self):
        rng = np.random.default_rng(1)
        m = GaussianMap()
        for kf in range(5):
            m.insert_from_points(rng.normal(size=(20, 3)),
                                 rng.uniform(0, 1, (20, 3)), kf)
            m.opacity_logits[rng.integers(0, len(m), 5)] = logit(0.01)
            m.prune(kf)
            for key in ("means", "quats", "log_scales", "opacity_logits", "colors"):
                assert m.grads[key].shape == getattr(m, key).shape
            assert np.all(np.isfinite(m.means))


class TestSnapshotFormat:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(6)
        m = GaussianMap()
        m.insert_from_points(rng.normal(size=(13, 3)), rng.uniform(0, 1, (13, 3)), 0)
        m.log_scales[:] = rng.uniform(-3, 0, (13, 3))
        path = tmp_path / "map.ogsm"
        m.save(path)
        m2 = GaussianMap.load(path)
        assert len(m2) == 13
        np.testing.assert_array_equal(m.means.astype(np.float32),
                                      m2.means.astype(np.float32))
        np.testing.assert_array_equal(m.log_scales.astype(np.float32),
                                      m2.log_scales.astype(np.float32))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ogsm"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(FormatError) as ei:
            GaussianMap.load(path)
        assert ei.value.offset == 0

    def test_truncated(self, tmp_path):
        m = GaussianMap()
        m.insert_from_points([[0, 0, 1.0], [1, 1, 1.0]], np.full((2, 3), 0.5), 0)
        path = tmp_path / "map.ogsm"
        m.save(path)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) - 8])
        with pytest.raises(FormatError):
            GaussianMap.load(path)
