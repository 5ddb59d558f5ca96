"""Trajectory and image-quality metrics: ATE RMSE, PSNR, SSIM."""

from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d

from .trajectory import Trajectory

PSNR_CAP_DB = 99.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def umeyama_alignment(src: np.ndarray, dst: np.ndarray, with_scale: bool):
    """Closed-form least-squares (s, R, t) with s R src + t ~= dst."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / src.shape[0]
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = float(np.mean(np.sum(xs**2, axis=1)))
        s = float(np.trace(np.diag(D) @ S) / var_s) if var_s > 0 else 1.0
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def ate_rmse(est: Trajectory, gt: Trajectory, mode: str = "sim3") -> float:
    """RMSE of aligned position residuals over common frame indices.

    mode "se3" aligns with rotation and translation only; "sim3" also absorbs
    a global scale, the right choice for monocular runs whose scale is
    provider-relative.
    """
    if mode not in ("se3", "sim3"):
        raise ValueError(f"unknown alignment mode {mode!r}")
    fe, fg = est.frame_indices(), gt.frame_indices()
    common, ie, ig = np.intersect1d(fe, fg, return_indices=True)
    if common.size < 3:
        raise ValueError(f"need >= 3 common frames, got {common.size}")
    pe = est.positions()[ie]
    pg = gt.positions()[ig]
    if np.array_equal(pe, pg):
        return 0.0  # identity alignment is optimal; avoid SVD round-off
    s, R, t = umeyama_alignment(pe, pg, with_scale=(mode == "sim3"))
    residual = (s * (R @ pe.T)).T + t - pg
    return float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))


def _check_image_pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 99 dB."""
    a, b = _check_image_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels.

    Statistics use 'valid' windows only, so borders are excluded.
    """
    a, b = _check_image_pair(a, b)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    win = _gaussian_window()
    vals = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mu_x = convolve2d(x, win, mode="valid")
        mu_y = convolve2d(y, win, mode="valid")
        mu_xx = convolve2d(x * x, win, mode="valid")
        mu_yy = convolve2d(y * y, win, mode="valid")
        mu_xy = convolve2d(x * y, win, mode="valid")
        var_x = mu_xx - mu_x**2
        var_y = mu_yy - mu_y**2
        cov = mu_xy - mu_x * mu_y
        num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))
