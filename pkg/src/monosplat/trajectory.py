"""Camera trajectories and TUM-format text io.

Entries hold world-to-camera poses keyed by strictly increasing frame index.
Files follow the TUM convention (``timestamp tx ty tz qx qy qz qw`` per line,
camera-to-world), so positions in the file are camera centers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, quat_to_rot, rot_to_quat


@dataclass
class Trajectory:
    entries: list[tuple[int, float, Pose]] = field(default_factory=list)

    def append(self, frame_idx: int, timestamp: float, pose_cw: Pose):
        if self.entries and frame_idx <= self.entries[-1][0]:
            raise ValueError(f"frame indices must increase, got {frame_idx} "
                             f"after {self.entries[-1][0]}")
        self.entries.append((frame_idx, timestamp, pose_cw))

    def set_pose(self, frame_idx: int, pose_cw: Pose):
        for i, (f, ts, _) in enumerate(self.entries):
            if f == frame_idx:
                self.entries[i] = (f, ts, pose_cw)
                return
        raise KeyError(frame_idx)

    def __len__(self) -> int:
        return len(self.entries)

    def frame_indices(self) -> np.ndarray:
        return np.array([f for f, _, _ in self.entries], dtype=np.int64)

    def pose(self, frame_idx: int) -> Pose:
        for f, _, p in self.entries:
            if f == frame_idx:
                return p
        raise KeyError(frame_idx)

    def positions(self) -> np.ndarray:
        """(N, 3) camera centers in world coordinates."""
        return np.array([-(p.rotation.T @ p.translation) for _, _, p in self.entries])

    def save_tum(self, path):
        with open(path, "w") as f:
            for _, ts, p in self.entries:
                c = -(p.rotation.T @ p.translation)
                w, x, y, z = rot_to_quat(p.rotation.T)
                f.write(f"{ts:.6f} {c[0]:.9f} {c[1]:.9f} {c[2]:.9f} "
                        f"{x:.9f} {y:.9f} {z:.9f} {w:.9f}\n")

    @staticmethod
    def load_tum(path) -> "Trajectory":
        traj = Trajectory()
        with open(path) as f:
            idx = 0
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                vals = [float(v) for v in line.split()]
                if len(vals) != 8:
                    raise ValueError(f"TUM line needs 8 values, got {len(vals)}")
                ts, tx, ty, tz, qx, qy, qz, qw = vals
                R_wc = quat_to_rot(np.array([qw, qx, qy, qz]))
                center = np.array([tx, ty, tz])
                traj.append(idx, ts, Pose(R_wc.T, -R_wc.T @ center))
                idx += 1
        return traj
