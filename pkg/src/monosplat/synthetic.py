"""Synthetic street-corridor sequences for end-to-end verification.

Generates a colored point scene along a smooth camera path, renders ground
truth images from a dense Gaussian version of that scene, and writes a full
dataset (frames, intrinsics, TUM ground truth, OGPM pair files, scene.npz).
Everything is a pure function of the seed.

Dimensions are street scale (meters): camera 1.6 m above the ground, building
walls at +-7 m, forward speed 1.2 m per frame.  The engine's default step
sizes are proportioned for scenes of this size.
"""

from __future__ import annotations

import math
import os

import numpy as np

from .dataset import SequenceDataset, save_image
from .geometry import Pose
from .pointmap import save_pair, synth_pair
from .rasterizer import CameraIntrinsics, render
from .scene import GaussianMap, logit
from .trajectory import Trajectory

TRAJECTORY_KINDS = ("straight", "turn", "slope")
DEFAULT_SPEED = 1.2
FPS = 10.0

GROUND_Y = 1.6
WALL_X = 7.0
WALL_TOP = -4.5


def _heading_increments(n_frames: int, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame yaw and pitch increments in degrees."""
    dyaw = np.zeros(n_frames)
    dpitch = np.zeros(n_frames)
    if kind == "turn":
        start = max(2, int(round(0.4 * n_frames)))
        # One sharp step inside the turn exercises the full LR reset range.
        for offset, step in enumerate((10.0, 15.0, 50.0, 15.0)):
            if start + offset < n_frames:
                dyaw[start + offset] = step
    elif kind == "slope":
        start = max(2, int(round(0.4 * n_frames)))
        for offset in range(5):
            if start + offset < n_frames:
                dpitch[start + offset] = 4.0
            if start + 10 + offset < n_frames:
                dpitch[start + 10 + offset] = -4.0
    elif kind != "straight":
        raise ValueError(f"unknown trajectory kind {kind!r}")
    return dyaw, dpitch


def _yaw_pitch_rot(yaw: float, pitch: float) -> np.ndarray:
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    r_yaw = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    r_pitch = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    return r_yaw @ r_pitch


def make_trajectory(n_frames: int, kind: str,
                    speed: float = DEFAULT_SPEED) -> list[Pose]:
    """World-to-camera poses of a forward-moving camera; frame 0 is identity.

    The vehicle slows to half speed on frames that change heading.
    """
    dyaw, dpitch = _heading_increments(n_frames, kind)
    poses = []
    yaw = pitch = 0.0
    pos = np.zeros(3)
    for k in range(n_frames):
        yaw += math.radians(dyaw[k])
        pitch += math.radians(dpitch[k])
        r_wc = _yaw_pitch_rot(yaw, pitch)
        poses.append(Pose(r_wc.T, -r_wc.T @ pos))
        step = speed * (0.5 if (dyaw[k] != 0 or dpitch[k] != 0) else 1.0)
        pos = pos + step * (r_wc @ np.array([0.0, 0.0, 1.0]))
    return poses


def _path_frames(poses: list[Pose]):
    """Camera centers and camera-to-world headings per frame."""
    centers = np.array([-(p.rotation.T @ p.translation) for p in poses])
    headings = [p.rotation.T for p in poses]
    return centers, headings


def make_scene(poses: list[Pose], n_points: int, seed: int,
               speed: float = DEFAULT_SPEED):
    """Street-canyon point cloud around the path: ground, two walls, clutter.

    Colors are smooth functions of world position (meter-scale features), so
    the scene is reconstructible from sparse samples.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFF, 101]))
    centers, headings = _path_frames(poses)
    n_frames = len(poses)

    # Station along the path in frame units, extended past both ends so the
    # camera always faces geometry (about 70 m beyond the last frame).
    station = rng.uniform(-10.0, n_frames - 1 + 70.0 / speed, n_points)
    idx = np.clip(station, 0, n_frames - 1).astype(int)
    extra = station - np.clip(station, 0, n_frames - 1)

    kind = rng.random(n_points)
    local = np.empty((n_points, 3))
    ground = kind < 0.5
    left = (kind >= 0.5) & (kind < 0.72)
    right = (kind >= 0.72) & (kind < 0.94)
    blob = kind >= 0.94
    # Ground density grows toward the lane center, where grazing-incidence
    # pixels need fine spacing.
    u = rng.uniform(-1.0, 1.0, ground.sum())
    local[ground] = np.stack([WALL_X * u * np.abs(u),
                              GROUND_Y + rng.normal(0, 0.05, ground.sum()),
                              np.zeros(ground.sum())], axis=1)
    local[left] = np.stack([-WALL_X + rng.normal(0, 0.1, left.sum()),
                            rng.uniform(WALL_TOP, GROUND_Y, left.sum()),
                            np.zeros(left.sum())], axis=1)
    local[right] = np.stack([WALL_X + rng.normal(0, 0.1, right.sum()),
                             rng.uniform(WALL_TOP, GROUND_Y, right.sum()),
                             np.zeros(right.sum())], axis=1)
    # Clutter (parked cars, poles) sits beside the lane, never in it.
    side = rng.choice([-1.0, 1.0], blob.sum())
    local[blob] = np.stack([side * rng.uniform(3.0, 5.8, blob.sum()),
                            rng.uniform(-1.6, 1.4, blob.sum()),
                            np.zeros(blob.sum())], axis=1)

    points = np.empty((n_points, 3))
    for i in range(n_points):
        h = headings[idx[i]]
        forward = h @ np.array([0.0, 0.0, 1.0])
        points[i] = centers[idx[i]] + extra[i] * speed * forward + h @ local[i]

    freqs = np.array([[0.23, 0.61, 0.17], [0.42, 0.13, 0.33], [0.11, 0.35, 0.52]])
    phases = np.array([0.0, 2.1, 4.2])
    colors = 0.5 + 0.42 * np.sin(points @ freqs.T + phases)
    colors += rng.normal(0.0, 0.02, colors.shape)
    return points, np.clip(colors, 0.03, 0.97)


def ground_truth_map(points: np.ndarray, colors: np.ndarray) -> GaussianMap:
    """Dense, nearly opaque Gaussians over the scene points for image rendering."""
    gt = GaussianMap()
    gt.insert_from_points(points, colors, 0)
    gt.opacity_logits[:] = logit(0.97)
    gt.log_scales += math.log(0.8)
    return gt


def synth_dataset(n_frames: int, trajectory_kind: str, n_points: int,
                  noise_sigma: float, seed: int, out_dir,
                  width: int = 112, height: int = 84,
                  focal: float = 100.0, speed: float = DEFAULT_SPEED) -> SequenceDataset:
    """Write a complete synthetic dataset; deterministic in the seed.

    The principal point sits at 35% of the image height so the ground plane
    fills most of the frame, as with a forward-facing vehicle camera.
    """
    if n_frames < 2:
        raise ValueError("need at least 2 frames")
    if trajectory_kind not in TRAJECTORY_KINDS:
        raise ValueError(f"trajectory kind must be one of {TRAJECTORY_KINDS}")
    out_dir = str(out_dir)
    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "pointmaps"), exist_ok=True)

    K = CameraIntrinsics(focal, focal, (width - 1) / 2.0, 0.35 * (height - 1),
                         width, height)
    poses = make_trajectory(n_frames, trajectory_kind, speed)
    points, colors = make_scene(poses, n_points, seed, speed)
    gt_map = ground_truth_map(points, colors)

    gt_traj = Trajectory()
    for k, pose in enumerate(poses):
        out = render(gt_map, pose, K)
        save_image(os.path.join(out_dir, "frames", f"{k:06d}.png"), out.color)
        gt_traj.append(k, k / FPS, pose)
    gt_traj.save_tum(os.path.join(out_dir, "groundtruth.txt"))
    K.save(os.path.join(out_dir, "intrinsics.txt"))

    for k in range(n_frames - 1):
        pair = synth_pair(points, colors, poses[k], poses[k + 1], K,
                          noise_sigma, seed, k, k + 1)
        save_pair(pair, os.path.join(out_dir, "pointmaps",
                                     f"{k:06d}_{k + 1:06d}.ogpm"))

    np.savez(os.path.join(out_dir, "scene.npz"), points=points, colors=colors)
    return SequenceDataset(out_dir)
