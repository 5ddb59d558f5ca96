"""On-disk image sequences.

Layout: ``frames/%06d.png`` (consecutively numbered RGB), ``intrinsics.txt``
(fx fy cx cy width height), optional ``groundtruth.txt`` (TUM) and optional
``pointmaps/%06d_%06d.ogpm`` pair files.
"""

from __future__ import annotations

import os
import re

import numpy as np
from PIL import Image

from .rasterizer import CameraIntrinsics
from .trajectory import Trajectory


class SequenceDataset:
    def __init__(self, root):
        self.root = str(root)
        frames_dir = os.path.join(self.root, "frames")
        if not os.path.isdir(frames_dir):
            raise FileNotFoundError(f"no frames/ directory under {self.root}")
        ids = sorted(int(m.group(1)) for f in os.listdir(frames_dir)
                     if (m := re.fullmatch(r"(\d{6})\.png", f)))
        if not ids:
            raise FileNotFoundError(f"no frame images in {frames_dir}")
        if ids != list(range(ids[0], ids[0] + len(ids))):
            raise ValueError("frame numbering is not consecutive")
        self.frame_ids = ids
        self.intrinsics = CameraIntrinsics.from_file(
            os.path.join(self.root, "intrinsics.txt"))
        gt_path = os.path.join(self.root, "groundtruth.txt")
        self.groundtruth = Trajectory.load_tum(gt_path) if os.path.exists(gt_path) else None

    def __len__(self) -> int:
        return len(self.frame_ids)

    @property
    def pointmap_dir(self) -> str:
        return os.path.join(self.root, "pointmaps")

    @property
    def scene_path(self) -> str:
        return os.path.join(self.root, "scene.npz")

    def image_path(self, frame_idx: int) -> str:
        return os.path.join(self.root, "frames", f"{frame_idx:06d}.png")

    def load_image(self, frame_idx: int) -> np.ndarray:
        """(H, W, 3) float image in [0, 1]."""
        with Image.open(self.image_path(frame_idx)) as im:
            return np.asarray(im.convert("RGB"), dtype=float) / 255.0

    def timestamp(self, frame_idx: int, fps: float = 10.0) -> float:
        return frame_idx / fps


def save_image(path, image01: np.ndarray):
    """Write a [0, 1] float image as 8-bit PNG."""
    arr = np.clip(np.asarray(image01) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
