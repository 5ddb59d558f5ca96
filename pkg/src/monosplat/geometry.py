"""Rigid-body geometry: SE(3) poses, se(3) twists, quaternions, rotation angles.

Poses follow the world-to-camera convention used throughout the engine:
``x_cam = R @ x_world + t``.  Pose increments are applied by left
multiplication, ``T <- se3_exp(xi) @ T``, so twist gradients produced by the
rasterizer live in the camera frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Taylor-series branch below this rotation magnitude; avoids 0/0 in the
# closed-form Rodrigues / left-Jacobian coefficients.
SMALL_ANGLE = 1e-8

# se3_log refuses rotations this close to the pi singularity.
PI_MARGIN = 1e-6


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric (hat) matrix of a 3-vector."""
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def _vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


@dataclass(frozen=True)
class Pose:
    """Rigid transform with rotation ``rotation`` and translation ``translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite pose components")
        if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-7:
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(R) < 0.0:
            raise ValueError("rotation has negative determinant")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other: (self o other)(x) = self(other(x))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N, 3) batch."""
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class Twist:
    """se(3) tangent element: rotation generator ``omega``, translation generator ``nu``."""

    omega: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float).reshape(3))
        object.__setattr__(self, "nu", np.asarray(self.nu, dtype=float).reshape(3))

    def as_vector(self) -> np.ndarray:
        """Stacked 6-vector (omega, nu)."""
        return np.concatenate([self.omega, self.nu])

    @staticmethod
    def from_vector(v: np.ndarray) -> "Twist":
        v = np.asarray(v, dtype=float).reshape(6)
        return Twist(v[:3], v[3:])


def se3_exp(xi: Twist) -> Pose:
    """Exponential map se(3) -> SE(3).

    Rodrigues closed form; Taylor branch under SMALL_ANGLE.  The translation
    goes through the left Jacobian V so that exp/log are exact inverses.
    """
    omega, nu = xi.omega, xi.nu
    if not (np.all(np.isfinite(omega)) and np.all(np.isfinite(nu))):
        raise ValueError("non-finite twist components")
    theta = float(np.linalg.norm(omega))
    K = skew(omega)
    K2 = K @ K
    if theta < SMALL_ANGLE:
        R = np.eye(3) + K + 0.5 * K2
        V = np.eye(3) + 0.5 * K + K2 / 6.0
    else:
        s, c = math.sin(theta), math.cos(theta)
        R = np.eye(3) + (s / theta) * K + ((1.0 - c) / theta**2) * K2
        V = np.eye(3) + ((1.0 - c) / theta**2) * K + ((theta - s) / theta**3) * K2
    return Pose(R, V @ nu)


def se3_log(T: Pose) -> Twist:
    """Logarithm map SE(3) -> se(3); inverse of se3_exp away from angle pi.

    Raises ValueError when the rotation angle is within PI_MARGIN of pi,
    where the axis is not recoverable from R - R^T.
    """
    R = T.rotation
    cos_theta = min(1.0, max(-1.0, (np.trace(R) - 1.0) / 2.0))
    theta = math.acos(cos_theta)
    if theta >= math.pi - PI_MARGIN:
        raise ValueError(f"rotation angle {theta:.9f} too close to pi for se3_log")
    if theta < SMALL_ANGLE:
        omega = _vee(R - R.T) / 2.0
        K = skew(omega)
        Vinv = np.eye(3) - 0.5 * K + (K @ K) / 12.0
    else:
        omega = _vee(R - R.T) * (theta / (2.0 * math.sin(theta)))
        K = skew(omega)
        coef = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / theta**2
        Vinv = np.eye(3) - 0.5 * K + coef * (K @ K)
    return Twist(omega, Vinv @ T.translation)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; q is normalized internally."""
    q = np.asarray(q, dtype=float).reshape(4)
    n = float(np.linalg.norm(q))
    if n <= 1e-12:
        raise ValueError("quaternion norm too small")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    """Quaternion (w, x, y, z) of a rotation matrix, Shepperd's branching."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    q = np.array([w, x, y, z])
    return q / np.linalg.norm(q)


def rotation_angle_deg(R0: np.ndarray, R1: np.ndarray) -> float:
    """Relative rotation angle acos((trace(R0^T R1) - 1) / 2), in degrees.

    The acos argument is clamped to [-1, 1]: orthonormality drift must map to
    0 or 180 degrees, never to an error.
    """
    R0 = np.asarray(R0, dtype=float)
    R1 = np.asarray(R1, dtype=float)
    for R in (R0, R1):
        if R.shape != (3, 3):
            raise ValueError(f"expected 3x3 rotation, got {R.shape}")
        if np.any(np.abs(np.linalg.norm(R, axis=1) - 1.0) > 1e-6):
            raise ValueError("rotation rows are not unit length")
    arg = (np.trace(R0.T @ R1) - 1.0) / 2.0
    arg = min(1.0, max(-1.0, arg))
    return math.degrees(math.acos(arg))
