"""3D Gaussian map: parameter storage, covariance construction, insertion, pruning.

Scales live in log-space and opacity in logit-space so unconstrained gradient
steps always yield a valid Gaussian.  The map is a structure-of-arrays with
gradient buffers and Adam moment accumulators of matching length; every
mutation bumps ``version`` so stale render state can be detected.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError
from .geometry import quat_to_rot

# insert_from_points defaults
SCALE_MIN = 1e-4
SCALE_MAX = 1.0
LONE_POINT_SCALE = 0.01
INIT_OPACITY = 0.5

# prune rule
PRUNE_OPACITY = 0.05
PRUNE_MIN_AGE = 3

OGSM_MAGIC = b"OGSM"
OGSM_VERSION = 1
_PARAM_GROUPS = ("means", "quats", "log_scales", "opacity_logits", "colors")


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


@dataclass
class Gaussian3D:
    """One anisotropic Gaussian: mean, (w,x,y,z) rotation, log-scales, opacity logit, RGB."""

    mean: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    color: np.ndarray
    created_at: int = 0

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    def covariance(self) -> np.ndarray:
        return covariance_from_params(self.rot, self.log_scale)


def covariance_from_params(rot: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """Sigma = R S S^T R^T with S = diag(exp(log_scale)); symmetric PSD."""
    R = quat_to_rot(rot)
    s = np.exp(np.asarray(log_scale, dtype=float).reshape(3))
    M = R * s[None, :]
    return M @ M.T


def eval_gaussian(g: Gaussian3D, x: np.ndarray) -> float:
    """Unnormalized density exp(-0.5 (x-mu)^T Sigma^-1 (x-mu)), in (0, 1]."""
    d = np.asarray(x, dtype=float).reshape(3) - g.mean
    cov = g.covariance()
    return float(np.exp(-0.5 * d @ np.linalg.solve(cov, d)))


class GaussianMap:
    """Growable Gaussian collection with gradient buffers and Adam state."""

    def __init__(self):
        self.means = np.zeros((0, 3))
        self.quats = np.zeros((0, 4))
        self.log_scales = np.zeros((0, 3))
        self.opacity_logits = np.zeros(0)
        self.colors = np.zeros((0, 3))
        self.created_at = np.zeros(0, dtype=np.int64)
        self.grads = {k: np.zeros_like(getattr(self, k)) for k in _PARAM_GROUPS}
        self.adam_m = {k: np.zeros_like(getattr(self, k)) for k in _PARAM_GROUPS}
        self.adam_v = {k: np.zeros_like(getattr(self, k)) for k in _PARAM_GROUPS}
        self.version = 0

    def __len__(self) -> int:
        return self.means.shape[0]

    def _param(self, key: str) -> np.ndarray:
        return getattr(self, key)

    def get(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.means[i].copy(), self.quats[i].copy(),
                          self.log_scales[i].copy(), float(self.opacity_logits[i]),
                          self.colors[i].copy(), int(self.created_at[i]))

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0.0

    def insert_from_points(self, points, colors, keyframe_idx: int) -> int:
        """Insert one Gaussian per finite point; returns the number inserted.

        Isotropic initial scale is the mean distance to the 3 nearest points of
        the same batch, clamped to [SCALE_MIN, SCALE_MAX]; a batch too small to
        have neighbors falls back to LONE_POINT_SCALE.
        """
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        colors = np.asarray(colors, dtype=float).reshape(-1, 3)
        if points.shape[0] != colors.shape[0]:
            raise ValueError(f"{points.shape[0]} points vs {colors.shape[0]} colors")
        keep = np.all(np.isfinite(points), axis=1) & np.all(np.isfinite(colors), axis=1)
        self.skipped_nonfinite = int(np.count_nonzero(~keep))
        points, colors = points[keep], colors[keep]
        n = points.shape[0]
        if n == 0:
            return 0

        if n >= 2:
            k = min(3, n - 1)
            dist, _ = cKDTree(points).query(points, k=k + 1)
            scale = np.clip(dist[:, 1:].mean(axis=1), SCALE_MIN, SCALE_MAX)
        else:
            scale = np.full(n, LONE_POINT_SCALE)

        quats = np.zeros((n, 4))
        quats[:, 0] = 1.0
        self._append(
            means=points,
            quats=quats,
            log_scales=np.log(scale)[:, None].repeat(3, axis=1),
            opacity_logits=np.full(n, logit(INIT_OPACITY)),
            colors=np.clip(colors, 0.0, 1.0),
            created_at=np.full(n, keyframe_idx, dtype=np.int64),
        )
        return n

    def _append(self, **arrays):
        n = arrays["means"].shape[0]
        for key in _PARAM_GROUPS:
            setattr(self, key, np.concatenate([self._param(key), arrays[key]]))
            pad = np.zeros_like(arrays[key], dtype=float)
            self.grads[key] = np.concatenate([self.grads[key], pad])
            self.adam_m[key] = np.concatenate([self.adam_m[key], pad.copy()])
            self.adam_v[key] = np.concatenate([self.adam_v[key], pad.copy()])
        self.created_at = np.concatenate([self.created_at, arrays["created_at"]])
        self.version += 1

    def prune(self, current_kf: int, opacity_threshold: float = PRUNE_OPACITY,
              min_age: int = PRUNE_MIN_AGE) -> int:
        """Drop aged low-opacity Gaussians and any with non-finite parameters."""
        if len(self) == 0:
            return 0
        finite = np.ones(len(self), dtype=bool)
        for key in _PARAM_GROUPS:
            finite &= np.all(np.isfinite(self._param(key).reshape(len(self), -1)), axis=1)
        aged = (current_kf - self.created_at) >= min_age
        weak = self.opacities < opacity_threshold
        keep = finite & ~(aged & weak)
        removed = int(np.count_nonzero(~keep))
        if removed:
            self._compact(keep)
        return removed

    def _compact(self, keep: np.ndarray):
        for key in _PARAM_GROUPS:
            setattr(self, key, self._param(key)[keep])
            self.grads[key] = self.grads[key][keep]
            self.adam_m[key] = self.adam_m[key][keep]
            self.adam_v[key] = self.adam_v[key][keep]
        self.created_at = self.created_at[keep]
        self.version += 1

    def adam_step(self, lr: dict, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8):
        """One Adam update per parameter group; lr maps group name -> rate.

        Quaternions are renormalized afterwards (leaves the rotation, and hence
        the rendered image, unchanged).
        """
        for key, rate in lr.items():
            g = self.grads[key]
            m, v = self.adam_m[key], self.adam_v[key]
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * g * g
            self._param(key)[...] -= rate * m / (np.sqrt(v) + eps)
        norms = np.linalg.norm(self.quats, axis=1, keepdims=True)
        np.clip(norms, 1e-12, None, out=norms)
        self.quats /= norms
        self.version += 1

    def snapshot_state(self):
        return {k: self._param(k).copy() for k in _PARAM_GROUPS}

    def restore_state(self, state):
        for k in _PARAM_GROUPS:
            self._param(k)[...] = state[k]
        self.version += 1

    # -- OGSM snapshot format -------------------------------------------------

    def save(self, path):
        """Write the map as an OGSM file (float32 payload; created_at not stored)."""
        n = len(self)
        payload = np.empty((n, 14), dtype="<f4")
        payload[:, 0:3] = self.means
        payload[:, 3:7] = self.quats
        payload[:, 7:10] = self.log_scales
        payload[:, 10] = self.opacity_logits
        payload[:, 11:14] = self.colors
        with open(path, "wb") as f:
            f.write(OGSM_MAGIC)
            f.write(struct.pack("<II", OGSM_VERSION, n))
            f.write(payload.tobytes())

    @staticmethod
    def load(path) -> "GaussianMap":
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:4] != OGSM_MAGIC:
            raise FormatError("bad magic", offset=0)
        if len(raw) < 12:
            raise FormatError("truncated header", offset=len(raw))
        version, n = struct.unpack_from("<II", raw, 4)
        if version != OGSM_VERSION:
            raise FormatError(f"unsupported version {version}", offset=4)
        need = 12 + n * 14 * 4
        if len(raw) < need:
            raise FormatError(f"payload truncated, need {need} bytes", offset=len(raw))
        payload = np.frombuffer(raw, dtype="<f4", count=n * 14, offset=12)
        payload = payload.reshape(n, 14).astype(float)
        m = GaussianMap()
        m._append(
            means=payload[:, 0:3],
            quats=payload[:, 3:7],
            log_scales=payload[:, 7:10],
            opacity_logits=payload[:, 10],
            colors=payload[:, 11:14],
            created_at=np.zeros(n, dtype=np.int64),
        )
        return m
