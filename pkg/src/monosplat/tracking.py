"""Per-frame camera tracking.

Initialization comes from RANSAC + PnP on pointmap correspondences (3D points
of the current frame expressed in the previous frame's coordinates, against
the current frame's own pixels), chained onto the previous pose; the pose is
then refined by gradient descent on se(3) against the Gaussian map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PnPDegenerateError
from .geometry import Pose, Twist, se3_exp, skew
from .pointmap import PointmapPair
from .rasterizer import CameraIntrinsics, photometric_loss_grad, render, backward_pose
from .scene import GaussianMap

RANSAC_MAX_ITERS = 500
RANSAC_THRESHOLD_PX = 2.0
RANSAC_CONFIDENCE = 0.99
RANSAC_MIN_INLIERS = 12
RANSAC_MIN_INLIER_FRAC = 0.20
MAX_CORRESPONDENCES = 4096


@dataclass
class TrackResult:
    pose: Pose
    inlier_count: int
    refine_iters_used: int
    final_loss: float
    status: str  # "ok" | "pnp_degenerate" | "diverged"


def _project(points_cam: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    z = points_cam[:, 2]
    return np.stack([K.fx * points_cam[:, 0] / z + K.cx,
                     K.fy * points_cam[:, 1] / z + K.cy], axis=1)


def _pnp_dlt(points: np.ndarray, pixels: np.ndarray, K: CameraIntrinsics):
    """Direct linear transform on >= 6 correspondences; None if degenerate."""
    n = points.shape[0]
    yx = (pixels[:, 0] - K.cx) / K.fx
    yy = (pixels[:, 1] - K.cy) / K.fy

    centroid = points.mean(axis=0)
    spread = np.linalg.norm(points - centroid, axis=1).mean()
    if spread < 1e-12:
        return None
    Xn = (points - centroid) / spread

    A = np.zeros((2 * n, 12))
    Xh = np.concatenate([Xn, np.ones((n, 1))], axis=1)
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -yx[:, None] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -yy[:, None] * Xh
    try:
        _, _, vt = np.linalg.svd(A)
    except np.linalg.LinAlgError:
        return None
    P = vt[-1].reshape(3, 4)
    # Undo the 3D normalization: X_normalized = (X - c) / s.
    P = P @ np.array([[1 / spread, 0, 0, -centroid[0] / spread],
                      [0, 1 / spread, 0, -centroid[1] / spread],
                      [0, 0, 1 / spread, -centroid[2] / spread],
                      [0, 0, 0, 1.0]])
    B = P[:, :3]
    if np.linalg.det(B) < 0:
        P = -P
        B = -B
    U, S, Vt = np.linalg.svd(B)
    scale = S.mean()
    if scale < 1e-12:
        return None
    R = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt
    t = P[:, 3] / scale
    try:
        return Pose(R, t)
    except ValueError:
        return None


def _refine_pnp(points, pixels, K, pose: Pose, weights=None, iters: int = 10) -> Pose:
    """Weighted Gauss-Newton on reprojection error, se(3) left increments."""
    w = np.ones(points.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    for _ in range(iters):
        cam = pose.apply(points)
        z = cam[:, 2]
        good = z > 1e-9
        if np.count_nonzero(good) < 6:
            return pose
        c, zz, ww = cam[good], z[good], w[good]
        res = (_project(c, K) - pixels[good]).reshape(-1)
        n = c.shape[0]
        Jpi = np.zeros((n, 2, 3))
        Jpi[:, 0, 0] = K.fx / zz
        Jpi[:, 0, 2] = -K.fx * c[:, 0] / zz**2
        Jpi[:, 1, 1] = K.fy / zz
        Jpi[:, 1, 2] = -K.fy * c[:, 1] / zz**2
        J = np.zeros((n, 2, 6))
        for i in range(n):
            J[i, :, :3] = -Jpi[i] @ skew(c[i])
            J[i, :, 3:] = Jpi[i]
        Jf = J.reshape(-1, 6)
        wf = np.repeat(ww, 2)
        H = Jf.T @ (wf[:, None] * Jf)
        g = Jf.T @ (wf * res)
        try:
            delta = np.linalg.solve(H + 1e-12 * np.eye(6), -g)
        except np.linalg.LinAlgError:
            return pose
        pose = se3_exp(Twist(delta[:3], delta[3:])).compose(pose)
        if np.linalg.norm(delta) < 1e-14:
            break
    return pose


def pnp_ransac(points3d, pixels, K: CameraIntrinsics, weights=None, seed: int = 0):
    """Confidence-weighted RANSAC over 6-point DLT samples, then LS refinement.

    Returns (pose, inlier_mask).  Deterministic for a fixed seed.
    """
    points = np.asarray(points3d, dtype=float).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    n = points.shape[0]
    if n < 6 or pixels.shape[0] != n:
        raise ValueError(f"need >= 6 correspondences, got {n}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).reshape(n)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with positive sum")
    p = w / w.sum()

    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = 0
    needed = RANSAC_MAX_ITERS
    it = 0
    while it < min(RANSAC_MAX_ITERS, needed):
        it += 1
        sample = rng.choice(n, size=6, replace=False, p=p)
        pose = _pnp_dlt(points[sample], pixels[sample], K)
        if pose is None:
            continue
        cam = pose.apply(points)
        err = np.full(n, np.inf)
        front = cam[:, 2] > 1e-9
        err[front] = np.linalg.norm(_project(cam[front], K) - pixels[front], axis=1)
        mask = err < RANSAC_THRESHOLD_PX
        count = int(np.count_nonzero(mask))
        if count > best_count:
            best_count, best_mask = count, mask
            ratio = count / n
            if ratio >= 1.0:
                break
            denom = np.log(max(1.0 - ratio**6, 1e-12))
            needed = int(np.ceil(np.log(1.0 - RANSAC_CONFIDENCE) / denom))
    if best_mask is None or best_count < RANSAC_MIN_INLIERS \
            or best_count < RANSAC_MIN_INLIER_FRAC * n:
        raise PnPDegenerateError(
            f"consensus too small: {best_count}/{n} inliers")

    pose = _pnp_dlt(points[best_mask], pixels[best_mask], K)
    if pose is None:
        raise PnPDegenerateError("degenerate inlier geometry")
    pose = _refine_pnp(points[best_mask], pixels[best_mask], K, pose, w[best_mask])
    cam = pose.apply(points)
    err = np.full(n, np.inf)
    front = cam[:, 2] > 1e-9
    err[front] = np.linalg.norm(_project(cam[front], K) - pixels[front], axis=1)
    return pose, err < RANSAC_THRESHOLD_PX


def estimate_relative_pose(pair: PointmapPair, K: CameraIntrinsics,
                           seed: int = 0, with_inliers: bool = False):
    """Relative pose frame a -> frame b from one pointmap pair.

    Correspondences are frame-b 3D points in frame-a coordinates (X2) against
    their own frame-b pixels, subsampled to MAX_CORRESPONDENCES by confidence.
    """
    usable = pair.valid2 & (pair.conf2 > 0)
    ys, xs = np.nonzero(usable)
    if ys.size < 6:
        raise ValueError(f"only {ys.size} usable correspondences")
    pts = pair.X2[ys, xs].astype(float)
    pix = np.stack([xs, ys], axis=1).astype(float)
    conf = pair.conf2[ys, xs].astype(float)
    if ys.size > MAX_CORRESPONDENCES:
        # Weighted sampling without replacement (Efraimidis-Spirakis keys).
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFF, 17]))
        keys = rng.random(ys.size) ** (1.0 / np.maximum(conf, 1e-12))
        keep = np.argsort(-keys)[:MAX_CORRESPONDENCES]
        pts, pix, conf = pts[keep], pix[keep], conf[keep]
    pose, mask = pnp_ransac(pts, pix, K, conf, seed)
    if with_inliers:
        return pose, int(np.count_nonzero(mask))
    return pose


def chain_pose(T_prev: Pose, T_trans: Pose) -> Pose:
    """T_k = T_trans o T_{k-1}: world-to-camera of the new frame."""
    return T_trans.compose(T_prev)


class PoseStepper:
    """Momentum-smoothed descent with fixed per-block step lengths.

    The raw twist gradient scale depends on image resolution and map content,
    so steps are normalized per block: each update rotates by exactly lr_rot
    radians and translates by exactly lr_trans units along the smoothed
    descent direction.
    """

    def __init__(self, lr_rot: float = 3e-4, lr_trans: float = 1e-3,
                 momentum: float = 0.9):
        self.lr_rot = lr_rot
        self.lr_trans = lr_trans
        self.momentum = momentum
        self.m = np.zeros(6)

    def step(self, pose: Pose, grad: np.ndarray) -> Pose:
        self.m = self.momentum * self.m + (1.0 - self.momentum) * grad
        delta = np.zeros(6)
        n_rot = np.linalg.norm(self.m[:3])
        n_trans = np.linalg.norm(self.m[3:])
        if n_rot > 1e-20:
            delta[:3] = -self.lr_rot * self.m[:3] / n_rot
        if n_trans > 1e-20:
            delta[3:] = -self.lr_trans * self.m[3:] / n_trans
        return se3_exp(Twist(delta[:3], delta[3:])).compose(pose)


def refine_pose(map: GaussianMap, image: np.ndarray, T_init: Pose,
                K: CameraIntrinsics, max_iters: int = 100,
                lr_rot: float = 3e-4, lr_trans: float = 1e-3,
                momentum: float = 0.9, alpha_mask: float = 0.1,
                converge_rel: float = 1e-5, converge_window: int = 10,
                background=(0.0, 0.0, 0.0)) -> TrackResult:
    """Photometric pose refinement against the map; keeps the best-loss pose.

    The L1 loss is averaged over pixels whose accumulated alpha reaches
    alpha_mask, so unmapped regions do not pull the pose toward background.
    """
    if len(map) == 0:
        raise ValueError("cannot refine against an empty map")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    image = np.asarray(image, dtype=float)

    stepper = PoseStepper(lr_rot, lr_trans, momentum)
    pose = T_init
    best_pose, best_loss = T_init, np.inf
    history = []
    iters = 0
    for i in range(max_iters):
        iters = i + 1
        out = render(map, pose, K, background)
        mask = out.alpha >= alpha_mask
        if not np.any(mask):
            if i == 0:
                return TrackResult(T_init, 0, iters, np.inf, "diverged")
            break
        loss, dl = photometric_loss_grad(out, image, mask)
        if loss < best_loss:
            best_loss, best_pose = loss, pose
        history.append(best_loss)
        if loss == 0.0:
            break
        if i >= converge_window:
            prev = history[i - converge_window]
            if prev - best_loss < converge_rel * max(prev, 1e-12):
                break
        grad = backward_pose(out, dl, pose, K)
        pose = stepper.step(pose, grad)
    return TrackResult(best_pose, 0, iters, float(best_loss), "ok")
