"""Command-line interface: run, synth, eval, nvs, render."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import SlamConfig
from .dataset import SequenceDataset, save_image
from .geometry import Pose, quat_to_rot
from .metrics import ate_rmse
from .pipeline import evaluate_nvs, run_slam, write_outputs
from .rasterizer import CameraIntrinsics, render
from .scene import GaussianMap
from .synthetic import synth_dataset
from .trajectory import Trajectory


def _cmd_run(args) -> int:
    config = SlamConfig.from_file(args.config) if args.config else SlamConfig()
    if args.provider:
        config.provider = args.provider
        config.validate()
    dataset = SequenceDataset(args.input)
    result = run_slam(dataset, config)
    write_outputs(result, args.out)
    print(f"tracked {len(result.trajectory)} frames, "
          f"{len(result.keyframe_indices)} keyframes, "
          f"{len(result.map)} gaussians")
    if dataset.groundtruth is not None:
        ate = ate_rmse(result.trajectory, dataset.groundtruth, mode="sim3")
        print(f"ATE RMSE (sim3): {ate:.6f}")
    print(f"outputs in {args.out}")
    return 0


def _cmd_synth(args) -> int:
    synth_dataset(args.frames, args.kind, args.points, args.noise, args.seed,
                  args.out)
    print(f"wrote {args.frames}-frame '{args.kind}' sequence to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    est = Trajectory.load_tum(args.est)
    gt = Trajectory.load_tum(args.gt)
    ate = ate_rmse(est, gt, mode=args.mode)
    print(f"ATE RMSE ({args.mode}): {ate:.6f}")
    return 0


def _cmd_nvs(args) -> int:
    gmap = GaussianMap.load(args.map)
    dataset = SequenceDataset(args.input)
    traj = Trajectory.load_tum(args.traj)
    keyframes = set()
    if args.keyframes and os.path.exists(args.keyframes):
        keyframes = {int(line) for line in open(args.keyframes) if line.strip()}
    holdout = [f for f in dataset.frame_ids
               if f % args.holdout_every == 0 and f not in keyframes]
    mean_psnr, mean_ssim = evaluate_nvs(gmap, traj, dataset, holdout, keyframes)
    print(f"holdout frames: {len(holdout)}")
    print(f"mean PSNR: {mean_psnr:.3f} dB")
    print(f"mean SSIM: {mean_ssim:.4f}")
    return 0


def _cmd_render(args) -> int:
    gmap = GaussianMap.load(args.map)
    K = CameraIntrinsics.from_file(args.intrinsics)
    vals = [float(v) for v in args.pose.split()]
    if len(vals) != 7:
        raise SystemExit("pose must be 'tx ty tz qx qy qz qw' (camera-to-world)")
    tx, ty, tz, qx, qy, qz, qw = vals
    r_wc = quat_to_rot(np.array([qw, qx, qy, qz]))
    pose_cw = Pose(r_wc.T, -r_wc.T @ np.array([tx, ty, tz]))
    out = render(gmap, pose_cw, K)
    save_image(args.out, out.color)
    print(f"rendered {K.width}x{K.height} image to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="monosplat",
                                description="Monocular Gaussian-splatting SLAM")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run SLAM on an image sequence")
    run.add_argument("--input", required=True, help="dataset directory")
    run.add_argument("--config", help="key = value config file")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--provider", choices=["files", "synthetic"])
    run.set_defaults(func=_cmd_run)

    synth = sub.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("--frames", type=int, required=True)
    synth.add_argument("--kind", choices=["straight", "turn", "slope"],
                       default="straight")
    synth.add_argument("--points", type=int, default=24000)
    synth.add_argument("--noise", type=float, default=0.0)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True)
    synth.set_defaults(func=_cmd_synth)

    ev = sub.add_parser("eval", help="ATE RMSE between TUM trajectories")
    ev.add_argument("--est", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--mode", choices=["se3", "sim3"], default="sim3")
    ev.set_defaults(func=_cmd_eval)

    nvs = sub.add_parser("nvs", help="novel-view PSNR/SSIM on holdout frames")
    nvs.add_argument("--map", required=True)
    nvs.add_argument("--input", required=True)
    nvs.add_argument("--traj", required=True)
    nvs.add_argument("--holdout-every", type=int, default=5)
    nvs.add_argument("--keyframes", help="keyframes.txt from a run (excluded)")
    nvs.set_defaults(func=_cmd_nvs)

    rnd = sub.add_parser("render", help="render the map from a pose")
    rnd.add_argument("--map", required=True)
    rnd.add_argument("--pose", required=True,
                     help="'tx ty tz qx qy qz qw' camera-to-world")
    rnd.add_argument("--intrinsics", required=True)
    rnd.add_argument("--out", required=True)
    rnd.set_defaults(func=_cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
