"""Pointmap pairs, the provider seam, and the OGPM pair file format.

A pair holds per-pixel 3D points for two frames, both expressed in the first
frame's camera coordinates at the provider's (unknown) scale.  Arrays are kept
in float32 so the file round trip is bit-exact.  The regression network that
produces real pointmaps lives behind ``PointmapProvider``; tests and synthetic
runs use the oracle provider instead.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ProviderError
from .geometry import Pose
from .rasterizer import CameraIntrinsics

OGPM_MAGIC = b"OGPM"
OGPM_VERSION = 1


@dataclass
class PointmapPair:
    frame_a: int
    frame_b: int
    X1: np.ndarray      # (H,W,3) float32, frame-a points in frame-a coords
    conf1: np.ndarray   # (H,W) float32
    X2: np.ndarray      # (H,W,3) float32, frame-b points in frame-a coords
    conf2: np.ndarray   # (H,W) float32
    valid1: np.ndarray = field(init=False)
    valid2: np.ndarray = field(init=False)

    def __post_init__(self):
        self.X1 = np.ascontiguousarray(self.X1, dtype=np.float32)
        self.X2 = np.ascontiguousarray(self.X2, dtype=np.float32)
        self.conf1 = np.ascontiguousarray(self.conf1, dtype=np.float32)
        self.conf2 = np.ascontiguousarray(self.conf2, dtype=np.float32)
        if self.X1.shape != self.X2.shape or self.X1.ndim != 3 or self.X1.shape[2] != 3:
            raise ValueError(f"bad pointmap shapes {self.X1.shape} / {self.X2.shape}")
        if self.conf1.shape != self.X1.shape[:2] or self.conf2.shape != self.X2.shape[:2]:
            raise ValueError("confidence shape does not match pointmaps")
        for conf in (self.conf1, self.conf2):
            if np.any(~np.isfinite(conf)) or np.any(conf < 0):
                raise ValueError("confidences must be finite and non-negative")
        self.valid1 = np.all(np.isfinite(self.X1), axis=2)
        self.valid2 = np.all(np.isfinite(self.X2), axis=2)

    @property
    def height(self) -> int:
        return self.X1.shape[0]

    @property
    def width(self) -> int:
        return self.X1.shape[1]


class PointmapProvider:
    """Source of pointmap pairs; deterministic providers reproduce outputs exactly."""

    max_width: int | None = None
    max_height: int | None = None
    deterministic: bool = True

    def regress(self, image_a, image_b, frame_a: int, frame_b: int) -> PointmapPair:
        raise NotImplementedError


def regress_pair(provider: PointmapProvider, image_a, image_b,
                 frame_a: int, frame_b: int) -> PointmapPair:
    """Run the provider on one image pair, with resolution checking."""
    h, w = np.asarray(image_a).shape[:2]
    if np.asarray(image_b).shape[:2] != (h, w):
        raise ProviderError("image resolutions differ", frame_a, frame_b)
    if ((provider.max_width is not None and w > provider.max_width)
            or (provider.max_height is not None and h > provider.max_height)):
        raise ProviderError(f"resolution {w}x{h} exceeds provider capability",
                            frame_a, frame_b)
    try:
        pair = provider.regress(image_a, image_b, frame_a, frame_b)
    except ProviderError:
        raise
    except Exception as e:  # noqa: BLE001 - provider internals become ProviderError
        raise ProviderError(f"provider failed: {e}", frame_a, frame_b) from e
    if (pair.height, pair.width) != (h, w):
        raise ProviderError("provider returned mismatched resolution", frame_a, frame_b)
    return pair


def _rasterize_points(points_cam: np.ndarray, K: CameraIntrinsics):
    """Nearest-point z-buffer: flat pixel index -> winning point index."""
    z = points_cam[:, 2]
    ok = z > 1e-6
    u = np.full(points_cam.shape[0], -1.0)
    v = np.full(points_cam.shape[0], -1.0)
    u[ok] = K.fx * points_cam[ok, 0] / z[ok] + K.cx
    v[ok] = K.fy * points_cam[ok, 1] / z[ok] + K.cy
    px = np.round(u).astype(np.int64)
    py = np.round(v).astype(np.int64)
    ok &= (px >= 0) & (px < K.width) & (py >= 0) & (py < K.height)
    idx = np.nonzero(ok)[0]
    if idx.size == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    flat = py[idx] * K.width + px[idx]
    order = np.lexsort((idx, z[idx]))
    flat_sorted = flat[order]
    pix, first = np.unique(flat_sorted, return_index=True)
    return pix, idx[order][first]


def synth_pair(scene_points, colors, T_a: Pose, T_b: Pose, K: CameraIntrinsics,
               noise_sigma: float = 0.0, seed: int = 0,
               frame_a: int = 0, frame_b: int = 1) -> PointmapPair:
    """Oracle pair: exact scene geometry, both maps in frame-a coordinates.

    Each pixel hit by a scene point (nearest wins) carries the hit surface
    point on that pixel's ray, mapped through T_a, plus isotropic Gaussian
    noise; unhit pixels are invalid.  Like a real regression network, the
    value at a pixel lies exactly on the pixel ray at the observed depth.
    """
    pts = np.asarray(scene_points, dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("scene must be nonempty")
    H, W = K.height, K.width
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFF, frame_a, frame_b]))

    maps = []
    for pose in (T_a, T_b):
        X = np.full((H * W, 3), np.nan, dtype=float)
        conf = np.zeros(H * W, dtype=float)
        cam = pose.apply(pts)
        pix, winners = _rasterize_points(cam, K)
        if pix.size:
            z = cam[winners, 2]
            px = (pix % W).astype(float)
            py = (pix // W).astype(float)
            on_ray = np.stack([z * (px - K.cx) / K.fx,
                               z * (py - K.cy) / K.fy, z], axis=1)
            to_a = T_a.compose(pose.inverse())
            X[pix] = to_a.apply(on_ray)
            conf[pix] = 1.0
        noise = rng.normal(0.0, 1.0, (H * W, 3))
        if noise_sigma > 0:
            X[pix] += noise_sigma * noise[pix]
        maps.append((X.reshape(H, W, 3), conf.reshape(H, W)))
    (X1, c1), (X2, c2) = maps
    return PointmapPair(frame_a, frame_b, X1, c1, X2, c2)


def save_pair(pair: PointmapPair, path) -> None:
    """Write a pair as OGPM: header, then X1, conf1, X2, conf2 as float32 LE."""
    with open(path, "wb") as f:
        f.write(OGPM_MAGIC)
        f.write(struct.pack("<IQQII", OGPM_VERSION, pair.frame_a, pair.frame_b,
                            pair.width, pair.height))
        for arr in (pair.X1, pair.conf1, pair.X2, pair.conf2):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_pair(path) -> PointmapPair:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != OGPM_MAGIC:
        raise FormatError("bad magic", offset=0)
    header_size = 4 + 4 + 8 + 8 + 4 + 4
    if len(raw) < header_size:
        raise FormatError("truncated header", offset=len(raw))
    version, frame_a, frame_b, width, height = struct.unpack_from("<IQQII", raw, 4)
    if version != OGPM_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    hw = height * width
    need = header_size + (hw * 3 + hw + hw * 3 + hw) * 4
    if len(raw) < need:
        raise FormatError(f"payload truncated, need {need} bytes", offset=len(raw))
    off = header_size
    arrays = []
    for count, shape in ((hw * 3, (height, width, 3)), (hw, (height, width)),
                         (hw * 3, (height, width, 3)), (hw, (height, width))):
        arrays.append(np.frombuffer(raw, dtype="<f4", count=count,
                                    offset=off).reshape(shape).copy())
        off += count * 4
    X1, conf1, X2, conf2 = arrays
    return PointmapPair(int(frame_a), int(frame_b), X1, conf1, X2, conf2)


class FilePairProvider(PointmapProvider):
    """Reads precomputed OGPM files named ``%06d_%06d.ogpm`` from a directory."""

    def __init__(self, directory):
        self.directory = directory

    def regress(self, image_a, image_b, frame_a, frame_b):
        import os
        path = os.path.join(str(self.directory), f"{frame_a:06d}_{frame_b:06d}.ogpm")
        if not os.path.exists(path):
            raise ProviderError(f"missing pair file {path}", frame_a, frame_b)
        pair = load_pair(path)
        if (pair.frame_a, pair.frame_b) != (frame_a, frame_b):
            raise ProviderError("pair file frame ids do not match request",
                                frame_a, frame_b)
        return pair


class SyntheticOracleProvider(PointmapProvider):
    """Generates pairs from known scene geometry and ground-truth poses."""

    def __init__(self, scene_points, colors, poses_by_frame: dict,
                 K: CameraIntrinsics, noise_sigma: float = 0.0, seed: int = 0):
        self.scene_points = np.asarray(scene_points, dtype=float)
        self.colors = np.asarray(colors, dtype=float)
        self.poses = poses_by_frame
        self.K = K
        self.noise_sigma = noise_sigma
        self.seed = seed
        self.max_width = K.width
        self.max_height = K.height

    def regress(self, image_a, image_b, frame_a, frame_b):
        if frame_a not in self.poses or frame_b not in self.poses:
            raise ProviderError("no ground-truth pose for frame", frame_a, frame_b)
        return synth_pair(self.scene_points, self.colors,
                          self.poses[frame_a], self.poses[frame_b], self.K,
                          self.noise_sigma, self.seed, frame_a, frame_b)
