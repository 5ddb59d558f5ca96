"""The SLAM orchestrator: per-frame tracking, keyframe mapping, evaluation.

Frame 0 bootstraps the map from the first pointmap pair at unit scale.  Every
later frame is initialized by pointmap PnP chained onto the previous pose and
refined photometrically against the map.  Accepted keyframes trigger the scale
mapper, Gaussian insertion, window maintenance, the rotation-based iteration
adjustment and a round of local-window optimization.  Per-frame failures fall
back to a constant-velocity model and never abort the run.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .config import SlamConfig
from .dataset import SequenceDataset
from .errors import PnPDegenerateError, ProviderError
from .geometry import Pose, rotation_angle_deg
from .mapping import (Keyframe, LocalWindow, LrSchedule, ScaleState,
                      adjust_iterations, insert_at_keyframe, match_cross_pair,
                      optimize_window, scale_ratio, should_insert_keyframe,
                      update_cumulative_scale, update_window)
from .metrics import psnr, ssim
from .pointmap import (FilePairProvider, PointmapProvider,
                       SyntheticOracleProvider, regress_pair)
from .rasterizer import render
from .scene import GaussianMap
from .tracking import chain_pose, estimate_relative_pose, refine_pose
from .trajectory import Trajectory

FPS = 10.0

LOG_COLUMNS = ["frame", "timestamp", "is_keyframe", "status", "inliers",
               "refine_iters", "loss", "rho_bar", "scale_cumulative",
               "theta_deg", "n_iter", "lr_means", "n_gaussians", "window_size"]


@dataclass
class SlamResult:
    trajectory: Trajectory
    map: GaussianMap
    log: list[dict] = field(default_factory=list)
    keyframe_indices: list[int] = field(default_factory=list)


def _frame_seed(base: int, frame: int) -> int:
    return (base * 1000003 + frame * 7919 + 1) & 0x7FFFFFFF


def make_provider(dataset: SequenceDataset, config: SlamConfig) -> PointmapProvider:
    if config.provider == "files":
        return FilePairProvider(dataset.pointmap_dir)
    scene_path = dataset.scene_path
    if not os.path.exists(scene_path):
        raise FileNotFoundError(
            f"synthetic provider needs {scene_path} (points + colors)")
    if dataset.groundtruth is None:
        raise FileNotFoundError("synthetic provider needs groundtruth.txt")
    data = np.load(scene_path)
    poses = {f: dataset.groundtruth.pose(f) for f in dataset.groundtruth.frame_indices()}
    return SyntheticOracleProvider(data["points"], data["colors"], poses,
                                   dataset.intrinsics, config.provider_noise,
                                   config.seed)


def run_slam(dataset: SequenceDataset, config: SlamConfig,
             provider: PointmapProvider | None = None) -> SlamResult:
    """Track and map the whole sequence; returns trajectory, map and a log."""
    if len(dataset) < 2:
        raise ValueError("need at least 2 frames")
    K = dataset.intrinsics
    provider = provider if provider is not None else make_provider(dataset, config)

    gmap = GaussianMap()
    window = LocalWindow(capacity=config.window_capacity)
    scale_state = ScaleState()
    schedule = LrSchedule(lr_init=config.lr_means_init,
                          lr_final=config.lr_means_final,
                          horizon=config.lr_horizon)
    trajectory = Trajectory()
    log: list[dict] = []
    kf_indices: list[int] = []

    frames = dataset.frame_ids
    poses: dict[int, Pose] = {}
    images: dict[int, np.ndarray] = {}

    def optimize(current_ord: int):
        return optimize_window(
            gmap, window, K, schedule, iters=config.map_iters,
            lambda_iso=config.lambda_iso, lr_quats=config.lr_quats,
            lr_scales=config.lr_scales, lr_opacity=config.lr_opacity,
            lr_colors=config.lr_colors, pose_lr_rot=config.track_lr_rot,
            pose_lr_trans=config.track_lr_trans,
            pose_momentum=config.track_momentum,
            background=config.background, current_kf=current_ord)

    def sync_window_poses():
        for kf in window.keyframes:
            poses[kf.frame_idx] = kf.pose

    # Frame 0: identity pose, first keyframe; insertion happens once the
    # (0, 1) pair exists.
    f0 = frames[0]
    images[f0] = dataset.load_image(f0)
    poses[f0] = Pose.identity()
    kf0 = Keyframe(f0, poses[f0], images[f0])
    window.keyframes.append(kf0)
    kf_indices.append(f0)
    kf_ord = 0
    last_kf = kf0
    log.append({"frame": f0, "timestamp": dataset.timestamp(f0), "is_keyframe": 1,
                "status": "bootstrap", "inliers": 0, "refine_iters": 0,
                "loss": 0.0, "rho_bar": 1.0,
                "scale_cumulative": scale_state.cumulative, "theta_deg": 0.0,
                "n_iter": schedule.n_iter, "lr_means": schedule.lr(),
                "n_gaussians": 0, "window_size": len(window)})

    prev_pair = None
    prev_t_trans = Pose.identity()

    for k in frames[1:]:
        images[k] = dataset.load_image(k)
        status = "ok"
        pair = None
        try:
            pair = regress_pair(provider, images[k - 1], images[k], k - 1, k)
        except ProviderError:
            status = "provider_fallback"

        if k == frames[1]:
            # Bootstrap: insert the first frame's geometry at unit scale.
            if pair is not None:
                insert_at_keyframe(gmap, pair, scale_state, poses[f0],
                                   images[f0], K, kf_ord, side="a",
                                   cell=config.subsample_cell)
                kf0.pointmap_to_prev = pair
                optimize(kf_ord)
                sync_window_poses()

        inliers = 0
        t_trans = prev_t_trans
        if pair is not None:
            try:
                t_trans, inliers = estimate_relative_pose(
                    pair, K, seed=_frame_seed(config.seed, k), with_inliers=True)
            except (ValueError, PnPDegenerateError):
                status = "pnp_fallback"
        t_init = chain_pose(poses[k - 1], t_trans)

        refine_iters = 0
        loss = float("nan")
        if len(gmap) > 0:
            result = refine_pose(
                gmap, images[k], t_init, K,
                max_iters=config.track_max_iters, lr_rot=config.track_lr_rot,
                lr_trans=config.track_lr_trans, momentum=config.track_momentum,
                alpha_mask=config.track_alpha_mask,
                background=config.background)
            poses[k] = result.pose
            refine_iters = result.refine_iters_used
            loss = result.final_loss
            if result.status == "diverged":
                status = "refine_diverged"
        else:
            poses[k] = t_init
        prev_t_trans = t_trans

        rho_bar = None
        theta = 0.0
        is_kf = False
        candidate = Keyframe(k, poses[k], images[k], pair)
        if should_insert_keyframe(candidate, last_kf, gmap, K,
                                  config.kf_covisibility, config.kf_coverage,
                                  config.kf_translation):
            is_kf = True
            kf_ord += 1
            if prev_pair is not None and pair is not None:
                try:
                    matches = match_cross_pair(prev_pair, pair)
                    rho_bar = scale_ratio(prev_pair, pair, matches,
                                          n_samples=config.scale_samples,
                                          seed=_frame_seed(config.seed, k),
                                          mode=config.scale_ratio_mode)
                    update_cumulative_scale(
                        scale_state, rho_bar,
                        clamp=(config.scale_clamp_min, config.scale_clamp_max))
                except ValueError:
                    rho_bar = None
            if pair is not None:
                insert_at_keyframe(gmap, pair, scale_state, poses[k - 1],
                                   images[k], K, kf_ord, side="b",
                                   cell=config.subsample_cell)
            update_window(window, candidate, gmap, K, config.evict_covisibility)
            theta = rotation_angle_deg(last_kf.pose.rotation,
                                       candidate.pose.rotation)
            if config.lr_adjust_enabled:
                adjust_iterations(schedule, last_kf.pose.rotation,
                                  candidate.pose.rotation)
            if len(gmap) > 0:
                optimize(kf_ord)
                sync_window_poses()
            last_kf = candidate
            kf_indices.append(k)
        prev_pair = pair

        log.append({"frame": k, "timestamp": dataset.timestamp(k),
                    "is_keyframe": int(is_kf), "status": status,
                    "inliers": inliers, "refine_iters": refine_iters,
                    "loss": loss,
                    "rho_bar": rho_bar if rho_bar is not None else 1.0,
                    "scale_cumulative": scale_state.cumulative,
                    "theta_deg": theta, "n_iter": schedule.n_iter,
                    "lr_means": schedule.lr(), "n_gaussians": len(gmap),
                    "window_size": len(window)})

    for k in frames:
        trajectory.append(k, dataset.timestamp(k), poses[k])
    return SlamResult(trajectory, gmap, log, kf_indices)


def write_outputs(result: SlamResult, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    result.trajectory.save_tum(os.path.join(out_dir, "trajectory.txt"))
    result.map.save(os.path.join(out_dir, "map.ogsm"))
    with open(os.path.join(out_dir, "keyframes.txt"), "w") as f:
        for k in result.keyframe_indices:
            f.write(f"{k}\n")
    with open(os.path.join(out_dir, "log.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in result.log:
            writer.writerow({k: _fmt(row[k]) for k in LOG_COLUMNS})


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.9g}"
    return v


def evaluate_nvs(gmap: GaussianMap, traj: Trajectory, dataset: SequenceDataset,
                 holdout, keyframes, background=(0.0, 0.0, 0.0)):
    """Mean PSNR/SSIM of renders at estimated poses over held-out frames.

    The holdout set must be nonempty and disjoint from the keyframe set.
    """
    holdout = sorted(int(h) for h in holdout)
    kf_set = {int(k) for k in keyframes}
    if not holdout:
        raise ValueError("holdout set is empty")
    overlap = kf_set.intersection(holdout)
    if overlap:
        raise ValueError(f"holdout frames overlap keyframes: {sorted(overlap)}")
    K = dataset.intrinsics
    psnrs, ssims = [], []
    for f in holdout:
        out = render(gmap, traj.pose(f), K, background)
        target = dataset.load_image(f)
        psnrs.append(psnr(out.color, target))
        ssims.append(ssim(out.color, target))
    return float(np.mean(psnrs)), float(np.mean(ssims))
