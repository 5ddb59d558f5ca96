"""Finite-difference oracles for every analytic gradient path.

Central differences on the photometric loss are the independent check: the
analytic backward pass must match them within relative 1e-3 (absolute floor
1e-6) on randomized scenes.
"""

import numpy as np
import pytest

from monosplat.geometry import Pose, Twist, se3_exp
from monosplat.rasterizer import (CameraIntrinsics, backward_gaussians,
                                  backward_pose, photometric_loss,
                                  photometric_loss_grad, render)
from monosplat.scene import GaussianMap

H_PARAM = 1e-4
H_POSE = 1e-5
REL_TOL = 1e-3
ABS_FLOOR = 1e-6

PARAM_KEYS = ("means", "quats", "log_scales", "opacity_logits", "colors")


def random_scene(seed, n_gaussians=8, width=48, height=36):
    """Random scene constructed away from the rasterizer's step discontinuities.

    Finite differences are only valid where the loss is differentiable, so the
    scene avoids the known jump sets: splats are wide enough that the whole
    image sits above the 1/255 alpha skip, opacities are capped so the
    transmittance early-out never triggers, and depths are spread out so sort
    order cannot flip under an h-sized perturbation.
    """
    rng = np.random.default_rng(seed)
    m = GaussianMap()
    z = np.linspace(2.5, 6.0, n_gaussians) + rng.uniform(0.01, 0.1, n_gaussians)
    pts = np.stack([rng.uniform(-0.9, 0.9, n_gaussians) * z / 3.0,
                    rng.uniform(-0.7, 0.7, n_gaussians) * z / 3.0,
                    z], axis=1)
    m.insert_from_points(pts, rng.uniform(0.15, 0.85, (n_gaussians, 3)), 0)
    m.log_scales[:] = rng.uniform(np.log(5.0), np.log(12.0), (n_gaussians, 3))
    m.quats[:] = rng.normal(size=(n_gaussians, 4))
    m.quats /= np.linalg.norm(m.quats, axis=1, keepdims=True)
    # sigmoid(logit) in [0.12, 0.5]: with <= 20 splats the transmittance
    # floor stays orders of magnitude above T_MIN.
    m.opacity_logits[:] = rng.uniform(-2.0, 0.0, n_gaussians)
    m.version += 1
    K = CameraIntrinsics(0.55 * width, 0.55 * width,
                         (width - 1) / 2.0, (height - 1) / 2.0, width, height)
    T = se3_exp(Twist(rng.normal(scale=0.02, size=3),
                      rng.normal(scale=0.04, size=3)))
    background = rng.uniform(0.0, 1.0, 3)
    # Keep the target a fixed distance from the render so the L1 sign pattern
    # cannot flip under the finite-difference step (|dr| << 0.08).
    base = render(m, T, K, background).color
    signs = rng.choice([-1.0, 1.0], size=base.shape)
    target = base - signs * rng.uniform(0.08, 0.3, size=base.shape)
    return m, K, T, target, background


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), ABS_FLOOR)


def analytic_grads(m, K, T, target, background):
    out = render(m, T, K, background)
    _, dl = photometric_loss_grad(out, target)
    m.zero_grads()
    backward_gaussians(out, dl)
    pose_grad = backward_pose(out, dl, T, K)
    return {k: m.grads[k].copy() for k in PARAM_KEYS}, pose_grad


def fd_param(m, K, T, target, background, key, i, j):
    arr = getattr(m, key)

    def poke(delta):
        if arr.ndim == 2:
            arr[i, j] += delta
        else:
            arr[i] += delta
        m.version += 1

    poke(+H_PARAM)
    lp = photometric_loss(render(m, T, K, background), target)
    poke(-2 * H_PARAM)
    lm = photometric_loss(render(m, T, K, background), target)
    poke(+H_PARAM)
    return (lp - lm) / (2 * H_PARAM)


def fd_pose(m, K, T, target, background, axis):
    e = np.zeros(6)
    e[axis] = H_POSE
    tp = se3_exp(Twist(e[:3], e[3:])).compose(T)
    e[axis] = -H_POSE
    tm = se3_exp(Twist(e[:3], e[3:])).compose(T)
    lp = photometric_loss(render(m, tp, K, background), target)
    lm = photometric_loss(render(m, tm, K, background), target)
    return (lp - lm) / (2 * H_POSE)


@pytest.mark.parametrize("seed", range(5))
def test_gaussian_parameter_gradients(seed):
    m, K, T, target, background = random_scene(seed)
    grads, _ = analytic_grads(m, K, T, target, background)
    for key in PARAM_KEYS:
        buf = grads[key]
        for i in range(len(m)):
            cols = range(buf.shape[1]) if buf.ndim == 2 else (None,)
            for j in cols:
                an = buf[i, j] if j is not None else buf[i]
                fd = fd_param(m, K, T, target, background, key, i,
                              j if j is not None else 0)
                assert rel_err(an, fd) < REL_TOL, (
                    f"{key}[{i},{j}]: analytic {an:.3e} vs fd {fd:.3e}")


@pytest.mark.parametrize("seed", range(8))
def test_pose_gradient_all_axes(seed):
    m, K, T, target, background = random_scene(seed + 100, n_gaussians=20)
    _, pose_grad = analytic_grads(m, K, T, target, background)
    for axis in range(6):
        fd = fd_pose(m, K, T, target, background, axis)
        assert rel_err(pose_grad[axis], fd) < REL_TOL, (
            f"pose axis {axis}: analytic {pose_grad[axis]:.3e} vs fd {fd:.3e}")


def test_zero_upstream_gradient_gives_zero():
    m, K, T, target, background = random_scene(0)
    out = render(m, T, K, background)
    m.zero_grads()
    backward_gaussians(out, np.zeros_like(out.color))
    for key in PARAM_KEYS:
        assert np.all(m.grads[key] == 0.0)
    assert np.all(backward_pose(out, np.zeros_like(out.color), T, K) == 0.0)


def test_color_gradient_is_blend_weight():
    # One splat, loss = rendered value of one channel at one pixel:
    # d loss / d color = alpha at that pixel.
    m = GaussianMap()
    m.insert_from_points([[0.0, 0.0, 2.0]], [[0.5, 0.5, 0.5]], 0)
    m.log_scales[:] = np.log(0.4)
    m.version += 1
    K = CameraIntrinsics(30, 30, 15.5, 11.5, 32, 24)
    out = render(m, Pose.identity(), K)
    py, px = 11, 15
    dl = np.zeros_like(out.color)
    dl[py, px, 0] = 1.0
    m.zero_grads()
    backward_gaussians(out, dl)
    # reconstruct alpha at the probe pixel
    d = np.array([px, py]) - out._mean2d[0]
    conic = out._conic[0]
    sigma = conic[0] * d[0]**2 + 2 * conic[1] * d[0] * d[1] + conic[2] * d[1]**2
    alpha = out._opacity[0] * np.exp(-0.5 * sigma)
    assert abs(m.grads["colors"][0, 0] - alpha) < 1e-12
    assert m.grads["colors"][0, 1] == 0.0


def test_pose_gradient_symmetry_single_splat():
    # Single gaussian straight ahead, loss increasing in image x: the x
    # translation gradient dominates and the z one vanishes by symmetry.
    m = GaussianMap()
    m.insert_from_points([[0.0, 0.0, 3.0]], [[0.8, 0.2, 0.2]], 0)
    m.log_scales[:] = np.log(0.5)
    m.version += 1
    K = CameraIntrinsics(40, 40, 23.5, 17.5, 48, 36)
    T = Pose.identity()
    out = render(m, T, K)
    xs = np.arange(K.width, dtype=float)
    dl = np.tile(((xs - xs.mean()) / xs.size)[None, :, None], (K.height, 1, 3))
    g = backward_pose(out, dl, T, K)
    g_nu = g[3:]
    assert abs(g_nu[0]) > 100 * abs(g_nu[2])
    # moving the camera along -x moves the splat toward +x in the image:
    # check the descent direction reduces the loss
    loss0 = float(np.sum(out.color * dl))
    step = se3_exp(Twist(np.zeros(3), -1e-4 * g_nu / np.linalg.norm(g_nu)))
    out2 = render(m, step.compose(T), K)
    assert float(np.sum(out2.color * dl)) < loss0
