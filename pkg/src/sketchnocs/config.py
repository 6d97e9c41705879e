"""Flat key=value configuration with typed defaults.

Every key is declared once in KEYS with its type, default and a short note;
unknown keys are rejected so typos fail loudly. Commands echo the effective
configuration into their output directory as config.used.cfg.
"""

from __future__ import annotations

import hashlib
import math
from pathlib import Path

from .errors import ConfigError


def _bool(text):
    t = str(text).strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# name -> (parser, default, note)
KEYS = {
    "seed": (int, 0, "master seed; commands derive sub-seeds from it"),
    "resolution": (int, 64, "raster side length in pixels (power of two >= 8)"),
    "ring_views": (int, 20, "views per object on the azimuth ring"),
    "ring_elevations": (str, "0.349,0.524", "comma list of elevations in radians, cycled"),
    "camera_distance": (float, 2.2, "camera distance in canonical units"),
    "camera_fov_deg": (float, 40.0, "perspective field of view in degrees"),
    "depth_thresh": (float, 0.02, "sketch stroke: min depth jump"),
    "normal_thresh": (float, 0.3, "sketch stroke: min 1-dot normal turn"),
    "mask_threshold": (float, 0.2, "foreground if any generated channel >= this"),
    "categories": (str, "chair,car,airplane", "procedural categories to generate"),
    "objects_per_category": (int, 32, "object count per category"),
    "test_fraction": (float, 0.2, "held-out fraction of objects"),
    "train_views": (int, 5, "views sampled per object per training step"),
    "prompt_file": (str, "", "optional TSV sidecar: object_id <tab> prompt"),
    "sve_feature_dim": (int, 32, "viewpoint feature width D_v"),
    "sve_bins": (int, 0, "viewpoint classes; 0 binds to ring_views"),
    "sve_epochs": (int, 40, "viewpoint encoder training epochs"),
    "sve_lr": (float, 1e-3, "viewpoint encoder Adam learning rate"),
    "sve_batch": (int, 16, "viewpoint encoder batch size"),
    "timesteps": (int, 1000, "diffusion steps T"),
    "beta_start": (float, 1e-4, "linear noise ramp start"),
    "beta_end": (float, 0.02, "linear noise ramp end"),
    "base_width": (int, 16, "denoiser channel width at full resolution"),
    "time_dim": (int, 32, "sinusoidal timestep embedding width"),
    "shape_dim": (int, 64, "shape feature width D_s from the control bottleneck"),
    "prompt_dim": (int, 32, "prompt embedding width"),
    "prompt_vocab": (int, 256, "hashed prompt vocabulary size (plus one null slot)"),
    "pe_mode": (str, "residual", "per-view mixing layer: residual | pure"),
    "loss_mvldm": (float, 1.0, "denoising loss weight"),
    "loss_l1": (float, 1.0, "pixel L1 loss weight"),
    "loss_perc": (float, 0.1, "perceptual loss weight"),
    "prompt_dropout": (float, 0.5, "train-time probability of blanking the prompt"),
    "lr": (float, 1e-3, "denoiser Adam learning rate"),
    "batch_size": (int, 2, "objects per training step"),
    "stage1_steps": (int, 200, "steps training only the conditioning branch"),
    "stage2_steps": (int, 600, "steps fine-tuning everything"),
    "checkpoint_every": (int, 100, "steps between resume checkpoints"),
    "ddim_steps": (int, 50, "sampling steps"),
    "splat_radius": (int, 1, "silhouette projection disc radius in pixels"),
    "eval_view_counts": (str, "1,2,3,5", "fused view counts swept by eval"),
    "emd_points": (int, 256, "clouds are subsampled to this size for EMD"),
    "cd_points": (int, 0, "optional CD subsample size; 0 = full clouds"),
    "previews": (_bool, True, "write 8-bit PPM previews next to NMAP rasters"),
}

# keys that must agree between a checkpoint and the config using it
_ARCH_KEYS = (
    "resolution",
    "base_width",
    "time_dim",
    "sve_feature_dim",
    "sve_bins",
    "ring_views",
    "shape_dim",
    "prompt_dim",
    "prompt_vocab",
    "pe_mode",
    "timesteps",
    "beta_start",
    "beta_end",
)


class Config:
    def __init__(self, values: dict):
        self._values = values

    def __getattr__(self, name):
        try:
            return self._values[name]
        except KeyError:
            raise AttributeError(name) from None

    def elevations(self) -> list[float]:
        return [float(x) for x in str(self.ring_elevations).split(",") if x.strip()]

    def view_counts(self) -> list[int]:
        return [int(x) for x in str(self.eval_view_counts).split(",") if x.strip()]

    def fov(self) -> float:
        return math.radians(self.camera_fov_deg)

    def n_bins(self) -> int:
        return self.sve_bins if self.sve_bins > 0 else self.ring_views

    def replace(self, **overrides) -> "Config":
        values = dict(self._values)
        for key, val in overrides.items():
            if key not in KEYS:
                raise ConfigError(f"unknown config key '{key}'")
            values[key] = val
        return Config(values)

    def as_text(self) -> str:
        lines = ["# effective configuration"]
        for key in KEYS:
            lines.append(f"{key} = {self._values[key]}")
        return "\n".join(lines) + "\n"

    def arch_hash(self) -> str:
        blob = ";".join(f"{k}={self._values[k]}" for k in _ARCH_KEYS)
        return hashlib.md5(blob.encode("utf-8")).hexdigest()

    def write_effective(self, out_dir) -> None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "config.used.cfg").write_text(self.as_text(), encoding="utf-8")


def default_config() -> Config:
    return Config({key: default for key, (_, default, _) in KEYS.items()})


def parse_config(path=None, overrides: dict | None = None) -> Config:
    """Read a key = value file; '#' starts a comment; unknown keys fail."""
    values = {key: default for key, (_, default, _) in KEYS.items()}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown config key '{key}'")
            parser = KEYS[key][0]
            try:
                values[key] = parser(val)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for '{key}': {exc}") from exc
    for key, val in (overrides or {}).items():
        if key not in KEYS:
            raise ConfigError(f"unknown config key '{key}'")
        values[key] = val
    return Config(values)
