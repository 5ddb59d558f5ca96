"""Runtime configuration: every tunable of the engine with validated ranges.

Config files are plain text, one ``key = value`` per line; blank lines and
``#`` comments are allowed.  Unknown keys are rejected with their line number.
"""

from __future__ import annotations

from dataclasses import dataclass, fields


@dataclass
class SlamConfig:
    seed: int = 0
    provider: str = "files"              # files | synthetic
    provider_noise: float = 0.0          # synthetic provider only
    background: tuple = (0.0, 0.0, 0.0)

    window_capacity: int = 8
    lambda_iso: float = 10.0
    kf_covisibility: float = 0.90
    kf_coverage: float = 0.5
    kf_translation: float = 0.25
    evict_covisibility: float = 0.30
    subsample_cell: int = 4

    track_max_iters: int = 100
    track_lr_rot: float = 3e-4
    track_lr_trans: float = 1e-3
    track_momentum: float = 0.9
    track_alpha_mask: float = 0.1

    map_iters: int = 60
    lr_means_init: float = 1.6e-2
    lr_means_final: float = 1.6e-4
    lr_horizon: float = 10000.0
    lr_quats: float = 1e-3
    lr_scales: float = 5e-3
    lr_opacity: float = 5e-2
    lr_colors: float = 2.5e-3
    lr_adjust_enabled: bool = True

    scale_ratio_mode: str = "cross"      # cross | within
    scale_clamp_min: float = 0.5
    scale_clamp_max: float = 2.0
    scale_samples: int = 2048

    prune_opacity: float = 0.05
    prune_age: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self):
        def req(cond, msg):
            if not cond:
                raise ValueError(f"config: {msg}")

        req(self.provider in ("files", "synthetic"),
            f"provider must be files|synthetic, got {self.provider!r}")
        req(self.scale_ratio_mode in ("cross", "within"),
            f"scale_ratio_mode must be cross|within, got {self.scale_ratio_mode!r}")
        req(len(self.background) == 3 and all(0 <= v <= 1 for v in self.background),
            "background must be three values in [0,1]")
        req(1 <= self.window_capacity <= 64, "window_capacity must be in [1, 64]")
        req(self.lambda_iso >= 0, "lambda_iso must be >= 0")
        for name in ("kf_covisibility", "kf_coverage", "evict_covisibility",
                     "track_alpha_mask"):
            req(0.0 <= getattr(self, name) <= 1.0, f"{name} must be in [0, 1]")
        req(self.subsample_cell >= 1, "subsample_cell must be >= 1")
        req(self.kf_translation >= 0, "kf_translation must be >= 0")
        req(self.track_max_iters >= 1 and self.map_iters >= 1,
            "iteration counts must be >= 1")
        req(0.0 <= self.track_momentum < 1.0, "track_momentum must be in [0, 1)")
        for name in ("track_lr_rot", "track_lr_trans", "lr_means_init",
                     "lr_means_final", "lr_quats", "lr_scales", "lr_opacity",
                     "lr_colors"):
            req(getattr(self, name) > 0, f"{name} must be positive")
        req(self.lr_horizon >= 1, "lr_horizon must be >= 1")
        req(0 < self.scale_clamp_min <= 1.0 <= self.scale_clamp_max,
            "scale clamp must bracket 1.0")
        req(self.scale_samples >= 2, "scale_samples must be >= 2")
        req(0.0 <= self.prune_opacity <= 1.0, "prune_opacity must be in [0, 1]")
        req(self.prune_age >= 0, "prune_age must be >= 0")
        req(self.provider_noise >= 0, "provider_noise must be >= 0")

    @staticmethod
    def from_file(path) -> "SlamConfig":
        known = {f.name: f.type for f in fields(SlamConfig)}
        kwargs = {}
        with open(path) as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                key, value = (s.strip() for s in line.split("=", 1))
                if key not in known:
                    raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
                kwargs[key] = _parse_value(key, value, lineno, path)
        return SlamConfig(**kwargs)


def _parse_value(key: str, value: str, lineno: int, path):
    default = getattr(SlamConfig, key)
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            parts = value.replace(",", " ").split()
            return tuple(float(p) for p in parts)
        return value
    except ValueError as e:
        raise ValueError(f"{path}:{lineno}: bad value for {key}: {e}") from e
