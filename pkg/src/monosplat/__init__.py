"""Monocular RGB-only SLAM on a 3D Gaussian splatting map.

Camera poses come from pointmap PnP chained frame to frame and refined by
differentiable rendering; the map grows from scale-corrected pointmaps and is
optimized jointly with keyframe poses over a covisibility-managed local
window.  Pure CPU (numpy + numba), deterministic for a fixed seed.
"""

from .config import SlamConfig
from .dataset import SequenceDataset
from .errors import FormatError, PnPDegenerateError, ProviderError, StaleRenderError
from .geometry import Pose, Twist, quat_to_rot, rot_to_quat, rotation_angle_deg, se3_exp, se3_log
from .mapping import (Keyframe, LocalWindow, LrSchedule, ScaleState,
                      adjust_iterations, covisibility, insert_at_keyframe,
                      isotropic_loss, match_cross_pair, optimize_window,
                      scale_ratio, should_insert_keyframe, subsample_pointmap,
                      update_cumulative_scale, update_window, visible_indices)
from .metrics import ate_rmse, psnr, ssim, umeyama_alignment
from .pipeline import SlamResult, evaluate_nvs, run_slam, write_outputs
from .pointmap import (FilePairProvider, PointmapPair, PointmapProvider,
                       SyntheticOracleProvider, load_pair, regress_pair,
                       save_pair, synth_pair)
from .rasterizer import (CameraIntrinsics, RenderOutput, Splat2D,
                         backward_gaussians, backward_pose, photometric_loss,
                         project_gaussian, render)
from .scene import Gaussian3D, GaussianMap, covariance_from_params, eval_gaussian
from .synthetic import make_scene, make_trajectory, synth_dataset
from .tracking import (TrackResult, chain_pose, estimate_relative_pose,
                       pnp_ransac, refine_pose)
from .trajectory import Trajectory

__version__ = "0.1.0"

__all__ = [
    "SlamConfig", "SequenceDataset", "FormatError", "PnPDegenerateError",
    "ProviderError", "StaleRenderError", "Pose", "Twist", "quat_to_rot",
    "rot_to_quat", "rotation_angle_deg", "se3_exp", "se3_log", "Keyframe",
    "LocalWindow", "LrSchedule", "ScaleState", "adjust_iterations",
    "covisibility", "insert_at_keyframe", "isotropic_loss", "match_cross_pair",
    "optimize_window", "scale_ratio", "should_insert_keyframe",
    "subsample_pointmap", "update_cumulative_scale", "update_window",
    "visible_indices", "ate_rmse", "psnr", "ssim", "umeyama_alignment",
    "SlamResult", "evaluate_nvs", "run_slam", "write_outputs",
    "FilePairProvider", "PointmapPair", "PointmapProvider",
    "SyntheticOracleProvider", "load_pair", "regress_pair", "save_pair",
    "synth_pair", "CameraIntrinsics", "RenderOutput", "Splat2D",
    "backward_gaussians", "backward_pose", "photometric_loss",
    "project_gaussian", "render", "Gaussian3D", "GaussianMap",
    "covariance_from_params", "eval_gaussian", "make_scene", "make_trajectory",
    "synth_dataset", "TrackResult", "chain_pose", "estimate_relative_pose",
    "pnp_ransac", "refine_pose", "Trajectory",
]
