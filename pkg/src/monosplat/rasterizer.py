"""Differentiable CPU splatting: EWA projection, tile compositing, analytic backward.

Forward: 3D Gaussians are projected through the pinhole Jacobian (EWA), binned
into 16x16 tiles, depth-sorted (ties broken by storage index) and alpha
composited front to back at integer pixel coordinates.

Backward: reverse-mode gradients through the compositing chain, the projection
and the covariance factorization, for both the Gaussian parameters and a
left-multiplied se(3) pose increment.  The pose derivative propagates the
camera dependence of the projected mean, of the projection Jacobian and of the
rotated 3D covariance; dropping any of the three fails finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .errors import StaleRenderError
from .geometry import Pose
from .scene import GaussianMap, Gaussian3D, sigmoid

TILE = _kernels.TILE
Z_NEAR = 0.2
DILATION = 0.3          # px^2 added to the 2D covariance diagonal
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @staticmethod
    def from_file(path) -> "CameraIntrinsics":
        vals = open(path).read().split()
        if len(vals) != 6:
            raise ValueError(f"intrinsics file needs 6 values, got {len(vals)}")
        fx, fy, cx, cy = map(float, vals[:4])
        return CameraIntrinsics(fx, fy, cx, cy, int(vals[4]), int(vals[5]))

    def save(self, path):
        with open(path, "w") as f:
            f.write(f"{self.fx:.9g} {self.fy:.9g} {self.cx:.9g} {self.cy:.9g} "
                    f"{self.width} {self.height}\n")


@dataclass
class Splat2D:
    mean2d: np.ndarray      # (2,) pixels
    cov2d: np.ndarray       # (2,2) pixels^2, dilation floor included
    depth: float            # camera-frame z
    source_idx: int = -1


@dataclass
class RenderOutput:
    """Rendered image plus the blending state needed by the backward pass."""

    color: np.ndarray         # (H,W,3) in [0,1] range of the composited chain
    alpha: np.ndarray         # (H,W) accumulated blending weight
    depth: np.ndarray         # (H,W) alpha-normalized expected depth
    transmittance: np.ndarray  # (H,W) remaining transmittance

    _map: GaussianMap = field(repr=False, default=None)
    _map_version: int = 0
    _pose: Pose = field(repr=False, default=None)
    _intrinsics: CameraIntrinsics = None
    _background: np.ndarray = field(repr=False, default=None)
    _idx: np.ndarray = field(repr=False, default=None)        # map indices, depth order
    _mean2d: np.ndarray = field(repr=False, default=None)
    _conic: np.ndarray = field(repr=False, default=None)      # (n,3) inverse cov xx,xy,yy
    _opacity: np.ndarray = field(repr=False, default=None)
    _power: np.ndarray = field(repr=False, default=None)
    _splat_color: np.ndarray = field(repr=False, default=None)
    _mu_c: np.ndarray = field(repr=False, default=None)       # (n,3) camera-frame means
    _tile_ptr: np.ndarray = field(repr=False, default=None)
    _tile_ids: np.ndarray = field(repr=False, default=None)
    _n_contrib: np.ndarray = field(repr=False, default=None)

    @property
    def n_rendered(self) -> int:
        return 0 if self._idx is None else int(self._idx.shape[0])

    def _check_fresh(self):
        if self._map is None or self._map.version != self._map_version:
            raise StaleRenderError("map mutated since the forward pass")


def _batch_quat_rot(quats: np.ndarray) -> np.ndarray:
    q = quats / np.linalg.norm(quats, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _power_threshold(opacity: np.ndarray) -> np.ndarray:
    """Mahalanobis power above which a splat's alpha falls below ALPHA_MIN."""
    return 2.0 * np.log(np.maximum(opacity, 1e-300) / ALPHA_MIN)


def _cull_radius(opacity: np.ndarray, lam_max: np.ndarray) -> np.ndarray:
    """Pixel radius beyond which a splat's alpha stays below ALPHA_MIN."""
    power = _power_threshold(opacity)
    return np.sqrt(np.maximum(power, 0.0) * np.maximum(lam_max, 0.0))


def _project_arrays(map: GaussianMap, T_CW: Pose, K: CameraIntrinsics):
    """Project all Gaussians; returns per-visible-splat arrays in depth order."""
    n = len(map)
    if n == 0:
        return None
    W, t = T_CW.rotation, T_CW.translation
    mu_c = map.means @ W.T + t
    front = mu_c[:, 2] >= Z_NEAR
    opac = map.opacities
    front &= opac > ALPHA_MIN
    idx0 = np.nonzero(front)[0]
    if idx0.size == 0:
        return None
    mu_c = mu_c[idx0]
    x, y, z = mu_c[:, 0], mu_c[:, 1], mu_c[:, 2]
    mean2d = np.stack([K.fx * x / z + K.cx, K.fy * y / z + K.cy], axis=1)

    R3 = _batch_quat_rot(map.quats[idx0])
    s = np.exp(map.log_scales[idx0])
    M = R3 * s[:, None, :]
    sigma_w = M @ M.transpose(0, 2, 1)
    sigma_c = np.einsum("ij,njk,lk->nil", W, sigma_w, W)

    J = np.zeros((idx0.size, 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * x / z**2
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * y / z**2
    cov2d = np.einsum("nij,njk,nlk->nil", J, sigma_c, J)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = _cull_radius(opac[idx0], lam_max)

    inside = ((mean2d[:, 0] >= -radius) & (mean2d[:, 0] <= K.width - 1 + radius)
              & (mean2d[:, 1] >= -radius) & (mean2d[:, 1] <= K.height - 1 + radius))
    if not np.any(inside):
        return None
    sel = np.nonzero(inside)[0]
    idx = idx0[sel]

    order = np.lexsort((idx, z[sel]))
    sel = sel[order]
    idx = idx0[sel]

    det_s = det[sel]
    conic = np.stack([cov2d[sel, 1, 1] / det_s,
                      -cov2d[sel, 0, 1] / det_s,
                      cov2d[sel, 0, 0] / det_s], axis=1)
    return {
        "idx": idx,
        "mean2d": np.ascontiguousarray(mean2d[sel]),
        "conic": np.ascontiguousarray(conic),
        "opacity": np.ascontiguousarray(opac[idx]),
        "color": np.ascontiguousarray(np.clip(map.colors[idx], 0.0, 1.0)),
        "depth": np.ascontiguousarray(z[sel]),
        "radius": np.ascontiguousarray(radius[sel]),
        "power": np.ascontiguousarray(_power_threshold(opac[idx])),
        "mu_c": np.ascontiguousarray(mu_c[sel]),
    }


def project_gaussian(g: Gaussian3D, T_CW: Pose, K: CameraIntrinsics,
                     source_idx: int = -1) -> Optional[Splat2D]:
    """EWA-project one Gaussian; None when culled (behind camera or off image)."""
    mu_c = T_CW.apply(g.mean)
    if mu_c[2] < Z_NEAR:
        return None
    opacity = g.opacity
    if opacity <= ALPHA_MIN:
        return None
    x, y, z = mu_c
    mean2d = np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])
    J = np.array([[K.fx / z, 0.0, -K.fx * x / z**2],
                  [0.0, K.fy / z, -K.fy * y / z**2]])
    W = T_CW.rotation
    cov2d = J @ W @ g.covariance() @ W.T @ J.T + DILATION * np.eye(2)
    det = cov2d[0, 0] * cov2d[1, 1] - cov2d[0, 1] ** 2
    mid = 0.5 * (cov2d[0, 0] + cov2d[1, 1])
    lam_max = mid + math.sqrt(max(mid * mid - det, 0.0))
    r = float(_cull_radius(np.array([opacity]), np.array([lam_max]))[0])
    if (mean2d[0] < -r or mean2d[0] > K.width - 1 + r
            or mean2d[1] < -r or mean2d[1] > K.height - 1 + r):
        return None
    return Splat2D(mean2d, cov2d, float(z), source_idx)


def render(map: GaussianMap, T_CW: Pose, K: CameraIntrinsics,
           background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Rasterize the map into an RGB image with blending state for backward."""
    bg = np.asarray(background, dtype=float).reshape(3)
    H, W = K.height, K.width
    proj = _project_arrays(map, T_CW, K)
    if proj is None:
        color = np.tile(bg, (H, W, 1))
        return RenderOutput(color, np.zeros((H, W)), np.zeros((H, W)),
                            np.ones((H, W)), _map=map, _map_version=map.version,
                            _pose=T_CW, _intrinsics=K, _background=bg)
    tile_ptr, tile_ids = _kernels.bin_splats(proj["mean2d"], proj["radius"], W, H)
    color, alpha, depth_acc, t_final, n_contrib = _kernels.forward(
        tile_ptr, tile_ids, proj["mean2d"], proj["conic"], proj["opacity"],
        proj["color"], proj["depth"], proj["power"], bg, W, H, T_MIN)
    depth = np.where(alpha > 1e-12, depth_acc / np.maximum(alpha, 1e-12), 0.0)
    return RenderOutput(
        color, alpha, depth, t_final,
        _map=map, _map_version=map.version, _pose=T_CW, _intrinsics=K,
        _background=bg, _idx=proj["idx"], _mean2d=proj["mean2d"],
        _conic=proj["conic"], _opacity=proj["opacity"], _power=proj["power"],
        _splat_color=proj["color"], _mu_c=proj["mu_c"],
        _tile_ptr=tile_ptr, _tile_ids=tile_ids, _n_contrib=n_contrib)


def photometric_loss(rendered: RenderOutput, target: np.ndarray) -> float:
    """Mean absolute color difference over all pixels and channels."""
    target = np.asarray(target, dtype=float)
    if target.shape != rendered.color.shape:
        raise ValueError(f"target shape {target.shape} != rendered {rendered.color.shape}")
    return float(np.mean(np.abs(rendered.color - target)))


def photometric_loss_grad(rendered: RenderOutput, target: np.ndarray,
                          mask: Optional[np.ndarray] = None):
    """(loss, dL/dcolor) of the L1 photometric loss, optionally pixel-masked.

    With a mask, the loss is the mean over masked-in pixels only; the mask is
    treated as constant (no gradient through it).
    """
    target = np.asarray(target, dtype=float)
    if target.shape != rendered.color.shape:
        raise ValueError(f"target shape {target.shape} != rendered {rendered.color.shape}")
    diff = rendered.color - target
    if mask is None:
        n = diff.size
        loss = float(np.sum(np.abs(diff))) / n
        return loss, np.sign(diff) / n
    m = mask.astype(float)[:, :, None]
    n = 3.0 * float(np.count_nonzero(mask))
    if n == 0:
        return 0.0, np.zeros_like(diff)
    loss = float(np.sum(np.abs(diff) * m)) / n
    return loss, np.sign(diff) * m / n


class _SplatGrads:
    """Per-splat gradients at every level of the projection chain."""

    __slots__ = ("idx", "g_mean_world", "g_quat", "g_log_scale", "g_opacity_logit",
                 "g_color", "g_mu_c", "g_sigma_c", "sigma_w", "mu_c")

    def __init__(self, **kw):
        for k, v in kw.items():
            setattr(self, k, v)


def _backward_core(out: RenderOutput, dl_dcolor: np.ndarray) -> Optional[_SplatGrads]:
    """Chain splat-level kernel gradients back to 3D Gaussian parameters."""
    out._check_fresh()
    dl = np.ascontiguousarray(dl_dcolor, dtype=float)
    if dl.shape != out.color.shape:
        raise ValueError(f"dL/dcolor shape {dl.shape} != image {out.color.shape}")
    if out._idx is None:
        return None
    K, m = out._intrinsics, out._map
    g_color2d, g_opac, g_mean2d, g_cov2d = _kernels.backward(
        out._tile_ptr, out._tile_ids, out._mean2d, out._conic, out._opacity,
        out._splat_color, out.transmittance, out._n_contrib, dl,
        out._background, K.width, K.height, out._power)

    idx = out._idx
    W = out._pose.rotation
    mu_c = out._mu_c
    x, y, z = mu_c[:, 0], mu_c[:, 1], mu_c[:, 2]

    # Recompute projection intermediates (map is unchanged: _check_fresh).
    quats = m.quats[idx]
    qnorm = np.linalg.norm(quats, axis=1, keepdims=True)
    qhat = quats / qnorm
    R3 = _batch_quat_rot(quats)
    s = np.exp(m.log_scales[idx])
    M = R3 * s[:, None, :]
    sigma_w = M @ M.transpose(0, 2, 1)
    sigma_c = np.einsum("ij,njk,lk->nil", W, sigma_w, W)
    J = np.zeros((idx.size, 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * x / z**2
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * y / z**2

    # dL/dSigma_I as a full symmetric matrix per splat.
    G2 = np.empty((idx.size, 2, 2))
    G2[:, 0, 0] = g_cov2d[:, 0]
    G2[:, 0, 1] = G2[:, 1, 0] = g_cov2d[:, 1]
    G2[:, 1, 1] = g_cov2d[:, 2]

    g_sigma_c = np.einsum("nji,njk,nkl->nil", J, G2, J)
    g_J = 2.0 * np.einsum("nij,njk,nkl->nil", G2, J, sigma_c)
    g_sigma_w = np.einsum("ji,njk,kl->nil", W, g_sigma_c, W)
    g_M = 2.0 * np.einsum("nij,njk->nik", g_sigma_w, M)

    g_log_scale = np.einsum("nji,nji->ni", R3, g_M) * s
    g_R3 = g_M * s[:, None, :]

    # Quaternion gradient via dR/dq of the normalized quaternion, then the
    # normalization projection back to the stored (possibly unnormalized) q.
    w_, x_, y_, z_ = qhat[:, 0], qhat[:, 1], qhat[:, 2], qhat[:, 3]
    zero = np.zeros_like(w_)
    dR = np.empty((4, idx.size, 3, 3))
    dR[0] = 2 * np.stack([np.stack([zero, -z_, y_], 1),
                          np.stack([z_, zero, -x_], 1),
                          np.stack([-y_, x_, zero], 1)], 1)
    dR[1] = 2 * np.stack([np.stack([zero, y_, z_], 1),
                          np.stack([y_, -2 * x_, -w_], 1),
                          np.stack([z_, w_, -2 * x_], 1)], 1)
    dR[2] = 2 * np.stack([np.stack([-2 * y_, x_, w_], 1),
                          np.stack([x_, zero, z_], 1),
                          np.stack([-w_, z_, -2 * y_], 1)], 1)
    dR[3] = 2 * np.stack([np.stack([-2 * z_, -w_, x_], 1),
                          np.stack([w_, -2 * z_, y_], 1),
                          np.stack([x_, y_, zero], 1)], 1)
    g_qhat = np.einsum("nij,knij->nk", g_R3, dR)
    g_quat = (g_qhat - np.sum(g_qhat * qhat, axis=1, keepdims=True) * qhat) / qnorm

    # dL/dmu_C: the projected-mean path plus the Jacobian path.
    g_mu_c = np.einsum("nji,nj->ni", J, g_mean2d)
    inv_z2 = 1.0 / z**2
    g_mu_c[:, 0] += g_J[:, 0, 2] * (-K.fx * inv_z2)
    g_mu_c[:, 1] += g_J[:, 1, 2] * (-K.fy * inv_z2)
    g_mu_c[:, 2] += (g_J[:, 0, 0] * (-K.fx * inv_z2)
                     + g_J[:, 0, 2] * (2.0 * K.fx * x / z**3)
                     + g_J[:, 1, 1] * (-K.fy * inv_z2)
                     + g_J[:, 1, 2] * (2.0 * K.fy * y / z**3))

    g_mean_world = g_mu_c @ W
    op = out._opacity
    g_opacity_logit = g_opac * op * (1.0 - op)
    return _SplatGrads(idx=idx, g_mean_world=g_mean_world, g_quat=g_quat,
                       g_log_scale=g_log_scale, g_opacity_logit=g_opacity_logit,
                       g_color=g_color2d, g_mu_c=g_mu_c, g_sigma_c=g_sigma_c,
                       sigma_w=sigma_w, mu_c=mu_c)


def backward_gaussians(out: RenderOutput, dl_dcolor: np.ndarray,
                       core: Optional[_SplatGrads] = None) -> None:
    """Accumulate dL/d(mean, rot, log_scale, opacity_logit, color) into the map buffers."""
    g = core if core is not None else _backward_core(out, dl_dcolor)
    if g is None:
        return
    m = out._map
    m.grads["means"][g.idx] += g.g_mean_world
    m.grads["quats"][g.idx] += g.g_quat
    m.grads["log_scales"][g.idx] += g.g_log_scale
    m.grads["opacity_logits"][g.idx] += g.g_opacity_logit
    m.grads["colors"][g.idx] += g.g_color


def backward_pose(out: RenderOutput, dl_dcolor: np.ndarray, T_CW: Pose,
                  K: CameraIntrinsics, core: Optional[_SplatGrads] = None) -> np.ndarray:
    """Gradient of the loss w.r.t. a left-multiplied se(3) increment at T_CW.

    Returns the 6-vector (omega, nu): T(eps) = se3_exp(eps) o T_CW.
    """
    g = core if core is not None else _backward_core(out, dl_dcolor)
    if g is None:
        return np.zeros(6)
    W = T_CW.rotation
    # Rotation of the camera-frame point: d mu_C / d omega = -[mu_C]x.
    g_omega = np.sum(np.cross(g.mu_c, g.g_mu_c), axis=0)
    # Rotation of the camera-frame covariance via W: dW/domega_k = [e_k]x W.
    ws = np.einsum("ij,njk->nik", W, g.sigma_w)
    g_W = 2.0 * np.einsum("nij,njk->nik", g.g_sigma_c, ws)
    C = np.einsum("ij,nkj->nik", W, g_W)
    g_omega[0] += np.sum(C[:, 1, 2] - C[:, 2, 1])
    g_omega[1] += np.sum(C[:, 2, 0] - C[:, 0, 2])
    g_omega[2] += np.sum(C[:, 0, 1] - C[:, 1, 0])
    g_nu = np.sum(g.g_mu_c, axis=0)
    return np.concatenate([g_omega, g_nu])
