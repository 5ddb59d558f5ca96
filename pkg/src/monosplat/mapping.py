"""Keyframing, adaptive scale mapping, local-window joint optimization.

Keyframes are selected by covisibility of the Gaussians they observe; the
local window keeps the most recent keyframe plus the best-overlapping peers.
At each keyframe the pointmap is scale-mapped by the cumulative inter-frame
ratio, subsampled and inserted, and the window is jointly optimized over
Gaussian parameters and keyframe poses with an isotropic scale penalty.
The learning rate for Gaussian means decays with cumulative iterations; the
cumulative count is cut back after rotations so that turns into unseen areas
optimize at a fresh rate again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import trim_mean

from .geometry import Pose, rotation_angle_deg
from .pointmap import PointmapPair
from .rasterizer import (ALPHA_MIN, CameraIntrinsics, RenderOutput, Z_NEAR,
                         _backward_core, _project_arrays, backward_gaussians,
                         backward_pose, photometric_loss_grad, render)
from .scene import GaussianMap
from .tracking import PoseStepper

KF_COVISIBILITY = 0.90
KF_COVERAGE = 0.5
EVICT_COVISIBILITY = 0.30
WINDOW_CAPACITY = 8
LAMBDA_ISO = 10.0
SCALE_CLAMP = (0.5, 2.0)
TRIM_FRACTION = 0.2          # cut from each tail of the ratio sample
LR_ADJUST_MIN_DEG = 2.0
LR_ADJUST_RESET_DEG = 90.0


@dataclass
class Keyframe:
    frame_idx: int
    pose: Pose
    image: np.ndarray
    pointmap_to_prev: PointmapPair | None = None
    visible_set: np.ndarray | None = None


@dataclass
class LocalWindow:
    capacity: int = WINDOW_CAPACITY
    keyframes: list[Keyframe] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.keyframes)

    @property
    def newest(self) -> Keyframe:
        return self.keyframes[-1]


@dataclass
class ScaleState:
    cumulative: float = 1.0
    history: list[float] = field(default_factory=list)


@dataclass
class LrSchedule:
    """Exponential mean-position learning-rate decay over effective iterations."""

    n_iter: float = 0.0
    lr_init: float = 1.6e-2
    lr_final: float = 1.6e-4
    horizon: float = 10000.0

    def lr(self) -> float:
        frac = min(max(self.n_iter, 0.0), self.horizon) / self.horizon
        return self.lr_init * (self.lr_final / self.lr_init) ** frac


def visible_indices(map: GaussianMap, pose: Pose, K: CameraIntrinsics) -> np.ndarray:
    """Sorted map indices passing projection culling with peak alpha > 1/255."""
    proj = _project_arrays(map, pose, K)
    if proj is None:
        return np.empty(0, dtype=np.int64)
    m2d, conic = proj["mean2d"], proj["conic"]
    dx = np.clip(m2d[:, 0], 0.0, K.width - 1.0) - m2d[:, 0]
    dy = np.clip(m2d[:, 1], 0.0, K.height - 1.0) - m2d[:, 1]
    sigma = conic[:, 0] * dx**2 + 2 * conic[:, 1] * dx * dy + conic[:, 2] * dy**2
    peak = proj["opacity"] * np.exp(-0.5 * np.maximum(sigma, 0.0))
    return np.sort(proj["idx"][peak > ALPHA_MIN])


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    if a.size == 0 and b.size == 0:
        return 0.0
    inter = np.intersect1d(a, b, assume_unique=True).size
    union = a.size + b.size - inter
    return inter / union if union else 0.0


def covisibility(kf_a: Keyframe, kf_b: Keyframe, map: GaussianMap,
                 K: CameraIntrinsics) -> float:
    """IoU of the Gaussian sets visible from the two keyframes."""
    return _iou(visible_indices(map, kf_a.pose, K),
                visible_indices(map, kf_b.pose, K))


def image_coverage(map: GaussianMap, pose: Pose, K: CameraIntrinsics,
                   alpha_threshold: float = 0.5,
                   rendered: RenderOutput | None = None) -> float:
    """Fraction of pixels whose accumulated alpha reaches alpha_threshold."""
    out = rendered if rendered is not None else render(map, pose, K)
    return float(np.mean(out.alpha >= alpha_threshold))


KF_TRANSLATION = 0.25


def should_insert_keyframe(current: Keyframe, last_kf: Keyframe | None,
                           map: GaussianMap, K: CameraIntrinsics,
                           covis_threshold: float = KF_COVISIBILITY,
                           coverage_threshold: float = KF_COVERAGE,
                           translation_threshold: float = KF_TRANSLATION) -> bool:
    """New keyframe when overlap with the last one drops, coverage is poor, or
    the camera moved a depth-relative distance.

    The translation criterion (baseline exceeding translation_threshold times
    the median rendered depth) is what fires under forward motion, where the
    visible-set overlap of an unbounded scene decays too slowly.
    """
    if last_kf is None:
        return True
    if len(map) == 0:
        return True
    if covisibility(current, last_kf, map, K) < covis_threshold:
        return True
    out = render(map, current.pose, K)
    covered = out.alpha >= 0.5
    if float(np.mean(covered)) < coverage_threshold:
        return True
    center_cur = -(current.pose.rotation.T @ current.pose.translation)
    center_kf = -(last_kf.pose.rotation.T @ last_kf.pose.translation)
    median_depth = float(np.median(out.depth[covered]))
    return bool(np.linalg.norm(center_cur - center_kf)
                > translation_threshold * median_depth)


def update_window(window: LocalWindow, new_kf: Keyframe, map: GaussianMap,
                  K: CameraIntrinsics,
                  evict_threshold: float = EVICT_COVISIBILITY) -> list[int]:
    """Append new_kf; evict over-capacity and low-overlap members (never the newest)."""
    window.keyframes.append(new_kf)
    new_set = visible_indices(map, new_kf.pose, K)
    evicted: list[int] = []

    def overlap(kf: Keyframe) -> float:
        return _iou(visible_indices(map, kf.pose, K), new_set)

    while len(window.keyframes) > window.capacity:
        candidates = window.keyframes[:-1]
        scores = [overlap(kf) for kf in candidates]
        worst = int(np.argmin(scores))
        evicted.append(candidates[worst].frame_idx)
        window.keyframes.remove(candidates[worst])
    for kf in list(window.keyframes[:-1]):
        if overlap(kf) < evict_threshold:
            evicted.append(kf.frame_idx)
            window.keyframes.remove(kf)
    return evicted


def match_cross_pair(pair_prev: PointmapPair, pair_curr: PointmapPair) -> np.ndarray:
    """Flat pixel indices of the shared frame valid in both pairs.

    pair_prev contributes its second map (the shared frame seen from the
    earlier pair), pair_curr its first.
    """
    if pair_prev.frame_b != pair_curr.frame_a:
        raise ValueError(
            f"pairs do not share a frame: {pair_prev.frame_b} vs {pair_curr.frame_a}")
    if pair_prev.X1.shape != pair_curr.X1.shape:
        raise ValueError("pair resolutions differ")
    both = pair_prev.valid2 & pair_curr.valid1
    return np.nonzero(both.reshape(-1))[0]


def scale_ratio(pair_prev: PointmapPair, pair_curr: PointmapPair,
                matches: np.ndarray, n_samples: int = 2048, seed: int = 0,
                mode: str = "cross") -> float:
    """Trimmed-mean scale ratio between consecutive pairs.

    mode "cross" uses ratios of cross-frame segment lengths (new pair over old
    pair); mode "within" compares same-frame segments of the shared frame.
    Raises ValueError when fewer than two usable samples survive.
    """
    matches = np.asarray(matches, dtype=np.int64)
    if matches.size < 2:
        raise ValueError("need at least 2 matches")
    flat = lambda a: a.reshape(-1, 3)  # noqa: E731

    if mode == "cross":
        i_pool = matches[pair_prev.valid1.reshape(-1)[matches]]
        j_pool = matches[pair_curr.valid2.reshape(-1)[matches]]
        num_i, num_j = flat(pair_curr.X1), flat(pair_curr.X2)
        den_i, den_j = flat(pair_prev.X1), flat(pair_prev.X2)
    elif mode == "within":
        i_pool = j_pool = matches
        num_i = num_j = flat(pair_curr.X1)
        den_i = den_j = flat(pair_prev.X2)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if i_pool.size < 1 or j_pool.size < 1:
        raise ValueError("insufficient valid matches for scale sampling")

    rng = np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFF, 29]))
    ii = i_pool[rng.integers(0, i_pool.size, n_samples)]
    jj = j_pool[rng.integers(0, j_pool.size, n_samples)]
    num = np.linalg.norm(num_i[ii].astype(float) - num_j[jj].astype(float), axis=1)
    den = np.linalg.norm(den_i[ii].astype(float) - den_j[jj].astype(float), axis=1)
    ok = (den > 1e-6) & np.isfinite(num) & np.isfinite(den)
    if np.count_nonzero(ok) < 2:
        raise ValueError("insufficient usable ratio samples")
    return float(trim_mean(num[ok] / den[ok], TRIM_FRACTION))


def update_cumulative_scale(state: ScaleState, rho_bar: float,
                            clamp=SCALE_CLAMP) -> float:
    """S_k = S_{k-1} * rho, with the per-step ratio clamped to the given range."""
    if not np.isfinite(rho_bar) or rho_bar <= 0:
        raise ValueError(f"scale ratio must be positive, got {rho_bar}")
    rho = min(max(rho_bar, clamp[0]), clamp[1])
    state.cumulative *= rho
    state.history.append(rho)
    return state.cumulative


def subsample_pointmap(pair: PointmapPair, cell: int = 4, side: str = "b"):
    """Best-confidence point per cell x cell block; high-variance blocks re-split.

    A block whose depth variance exceeds 4x the median block variance is
    re-tiled at half the cell size, bounding the output by 4 picks per block.
    Returns a list of (point (3,), (px, py)) tuples.
    """
    if cell < 1:
        raise ValueError("cell must be >= 1")
    X = pair.X1 if side == "a" else pair.X2
    conf = pair.conf1 if side == "a" else pair.conf2
    valid = pair.valid1 if side == "a" else pair.valid2
    H, W = valid.shape

    def best_in(y0, y1, x0, x1):
        sub = valid[y0:y1, x0:x1]
        if not sub.any():
            return None
        c = np.where(sub, conf[y0:y1, x0:x1], -1.0)
        k = int(np.argmax(c))
        dy, dx = divmod(k, x1 - x0)
        py, px = y0 + dy, x0 + dx
        return X[py, px].astype(float), (px, py)

    blocks = []
    variances = []
    for y0 in range(0, H, cell):
        for x0 in range(0, W, cell):
            y1, x1 = min(y0 + cell, H), min(x0 + cell, W)
            sub = valid[y0:y1, x0:x1]
            if sub.any():
                z = X[y0:y1, x0:x1, 2][sub]
                variances.append(float(np.var(z)))
            else:
                variances.append(np.nan)
            blocks.append((y0, y1, x0, x1))
    var = np.asarray(variances)
    have = var[np.isfinite(var)]
    median_var = float(np.median(have)) if have.size else 0.0

    picks = []
    half = (cell + 1) // 2
    for (y0, y1, x0, x1), v in zip(blocks, var):
        if not np.isfinite(v):
            continue
        if cell >= 2 and v > 4.0 * median_var:
            for sy in range(y0, y1, half):
                for sx in range(x0, x1, half):
                    p = best_in(sy, min(sy + half, y1), sx, min(sx + half, x1))
                    if p is not None:
                        picks.append(p)
        else:
            p = best_in(y0, y1, x0, x1)
            if p is not None:
                picks.append(p)
    return picks


def insert_at_keyframe(map: GaussianMap, pair: PointmapPair, scale: ScaleState,
                       T_pair_a: Pose, image: np.ndarray, K: CameraIntrinsics,
                       kf_idx: int, side: str = "b", cell: int = 4,
                       explained_alpha: float = 0.9,
                       explained_depth_rel: float = 0.05) -> int:
    """Scale-map, transform and insert the subsampled pointmap of a keyframe.

    Points are multiplied by the cumulative scale, moved to world through the
    inverse of the pair's first-frame pose, and colored from the keyframe
    image.  Points the map already explains (alpha and relative depth at their
    projection in the first-frame view) are skipped.
    """
    picks = subsample_pointmap(pair, cell, side)
    if not picks:
        return 0
    pts = np.array([p for p, _ in picks])
    pix = np.array([xy for _, xy in picks], dtype=np.int64)
    image = np.asarray(image, dtype=float)
    colors = image[pix[:, 1], pix[:, 0]]

    cam_a = scale.cumulative * pts
    world = T_pair_a.inverse().apply(cam_a)

    keep = np.ones(len(picks), dtype=bool)
    if len(map) > 0:
        out = render(map, T_pair_a, K)
        z = cam_a[:, 2]
        u = np.round(K.fx * cam_a[:, 0] / np.maximum(z, 1e-9) + K.cx).astype(np.int64)
        v = np.round(K.fy * cam_a[:, 1] / np.maximum(z, 1e-9) + K.cy).astype(np.int64)
        proj_ok = (z >= Z_NEAR) & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
        ui, vi = u[proj_ok], v[proj_ok]
        alpha_ok = out.alpha[vi, ui] >= explained_alpha
        depth_ok = np.abs(out.depth[vi, ui] - z[proj_ok]) < explained_depth_rel * z[proj_ok]
        explained = np.zeros(len(picks), dtype=bool)
        explained[np.nonzero(proj_ok)[0]] = alpha_ok & depth_ok
        keep = ~explained
    return map.insert_from_points(world[keep], colors[keep], kf_idx)


def isotropic_loss(map: GaussianMap) -> float:
    """Mean over Gaussians of the L1 deviation of linear scales from their mean."""
    if len(map) == 0:
        return 0.0
    s = np.exp(map.log_scales)
    dev = s - s.mean(axis=1, keepdims=True)
    return float(np.sum(np.abs(dev))) / len(map)


def isotropic_loss_grad(map: GaussianMap):
    """(loss, d loss / d log_scales)."""
    if len(map) == 0:
        return 0.0, np.zeros((0, 3))
    s = np.exp(map.log_scales)
    dev = s - s.mean(axis=1, keepdims=True)
    sgn = np.sign(dev)
    g_s = (sgn - sgn.mean(axis=1, keepdims=True)) / len(map)
    return float(np.sum(np.abs(dev))) / len(map), g_s * s


def adjust_iterations(schedule: LrSchedule, R_prev_kf: np.ndarray,
                      R_curr_kf: np.ndarray) -> float:
    """Cut the cumulative iteration count after rotation between keyframes.

    theta <= 2 deg leaves the count unchanged; theta >= 90 deg resets it to
    zero; in between the count is scaled by 1 - sqrt(theta / 90).
    """
    theta = rotation_angle_deg(R_prev_kf, R_curr_kf)
    if theta > LR_ADJUST_MIN_DEG:
        if theta >= LR_ADJUST_RESET_DEG:
            schedule.n_iter = 0.0
        else:
            schedule.n_iter = max(
                0.0, schedule.n_iter * (1.0 - math.sqrt(theta / LR_ADJUST_RESET_DEG)))
    return schedule.n_iter


def optimize_window(map: GaussianMap, window: LocalWindow, K: CameraIntrinsics,
                    schedule: LrSchedule, iters: int = 60,
                    lambda_iso: float = LAMBDA_ISO,
                    lr_quats: float = 1e-3, lr_scales: float = 5e-3,
                    lr_opacity: float = 5e-2, lr_colors: float = 2.5e-3,
                    pose_lr_rot: float = 3e-4, pose_lr_trans: float = 1e-3,
                    pose_momentum: float = 0.9, background=(0.0, 0.0, 0.0),
                    current_kf: int | None = None,
                    optimize_poses: bool = True) -> float:
    """Jointly optimize Gaussian parameters and window keyframe poses.

    Minimizes the summed photometric loss over the window plus lambda_iso
    times the isotropic penalty; Gaussians take Adam steps (means at the
    scheduled rate), poses take tracking-style steps with the first keyframe
    (frame 0) held fixed.  The best-objective state seen is kept.  Returns the
    final objective and prunes the map at the end.
    """
    if len(window) == 0:
        raise ValueError("window must contain at least one keyframe")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if len(map) == 0:
        return 0.0

    steppers = {id(kf): PoseStepper(pose_lr_rot, pose_lr_trans, pose_momentum)
                for kf in window.keyframes}

    def evaluate(with_grads: bool):
        total = 0.0
        pose_grads = {}
        if with_grads:
            map.zero_grads()
        for kf in window.keyframes:
            out = render(map, kf.pose, K, background)
            loss, dl = photometric_loss_grad(out, kf.image)
            total += loss
            if with_grads:
                core = _backward_core(out, dl)
                backward_gaussians(out, dl, core=core)
                pose_grads[id(kf)] = backward_pose(out, dl, kf.pose, K, core=core)
        iso, g_iso = isotropic_loss_grad(map)
        if with_grads:
            map.grads["log_scales"] += lambda_iso * g_iso
        return total + lambda_iso * iso, pose_grads

    # Positions are unobservable along view rays from a single view; freeze
    # them until the window holds a second viewpoint.
    means_lr_scale = 0.0 if len(window) == 1 else 1.0

    best_obj = np.inf
    best_state = None
    final_obj = np.inf
    for _ in range(iters):
        obj, pose_grads = evaluate(with_grads=True)
        if obj < best_obj:
            best_obj = obj
            best_state = (map.snapshot_state(), [kf.pose for kf in window.keyframes])
        map.adam_step({
            "means": means_lr_scale * schedule.lr(),
            "quats": lr_quats,
            "log_scales": lr_scales,
            "opacity_logits": lr_opacity,
            "colors": lr_colors,
        })
        if optimize_poses:
            for kf in window.keyframes:
                if kf.frame_idx == 0:
                    continue
                kf.pose = steppers[id(kf)].step(kf.pose, pose_grads[id(kf)])
        schedule.n_iter += 1.0
        final_obj = obj

    obj, _ = evaluate(with_grads=False)
    final_obj = obj
    if best_state is not None and best_obj < final_obj:
        params, poses = best_state
        map.restore_state(params)
        for kf, pose in zip(window.keyframes, poses):
            kf.pose = pose
        final_obj = best_obj
    kf_ord = current_kf if current_kf is not None else (
        int(map.created_at.max()) if len(map) else 0)
    map.prune(kf_ord)
    return float(final_obj)
