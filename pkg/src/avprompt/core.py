"""Domain types, configuration and clip validation shared across the package."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SAMPLE_RATE = 16000


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Model and optimisation hyper-parameters.

    Field names double as the keys of the flat config file, so a few of them
    (``L``) keep their short mathematical names.
    """

    resolution: int = 64
    L: int = 32
    strides: tuple = (4, 8, 16)
    patch_sizes: tuple = (4, 2, 1)
    tau: float = 0.10
    proj_dim: int = 64
    loss_weights: tuple = (20.0, 1.0, 1.0, 1.0)
    contrastive_samples_per_scale: int = 512
    lr: float = 1e-4
    poly_power: float = 0.9
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    pyramid_levels: int = 3
    num_mask_tokens: int = 3
    visual_attn_blocks: int = 9
    cond_attn_blocks: int = 3
    attn_heads: int = 4
    attn_dropout: float = 0.1
    sr_ratio: int = 2
    decoder_heads: int = 2
    text_vocab: int = 1000
    n_mels: int = 64
    contrastive: str = "audiocon"
    contrastive_first_frame_only: bool = False
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    dice_smooth: float = 1.0
    supervise_all_iou: bool = False

    def __post_init__(self):
        for name in ("strides", "patch_sizes", "loss_weights", "betas"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        problems = config_problems(self)
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def H_prime(self) -> int:
        return self.resolution // 16

    @property
    def W_prime(self) -> int:
        return self.resolution // 16

    @property
    def fusion_dim(self) -> int:
        # compressed width L' inside the cross-modal fusion
        return self.L // 2

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def config_problems(cfg: ModelConfig) -> list:
    problems = []
    if cfg.resolution <= 0 or cfg.resolution % 16:
        problems.append(f"resolution {cfg.resolution} not divisible by 16")
    if cfg.tau <= 0:
        problems.append("tau must be positive")
    if len(cfg.loss_weights) != 4 or any(w <= 0 for w in cfg.loss_weights):
        problems.append("loss_weights must be four positive numbers")
    if not 1 <= cfg.pyramid_levels <= 3:
        problems.append("pyramid_levels must be in {1, 2, 3}")
    if len(cfg.strides) != 3 or any(a >= b for a, b in zip(cfg.strides, cfg.strides[1:])):
        problems.append("strides must be three strictly increasing values")
    if len(cfg.patch_sizes) != len(cfg.strides) or any(
        p * s != 16 for p, s in zip(cfg.patch_sizes, cfg.strides)
    ):
        problems.append("patch_sizes[k] * strides[k] must equal 16")
    if cfg.L % cfg.attn_heads or cfg.L % cfg.decoder_heads or cfg.L % 8:
        problems.append("L must be divisible by 8 and by the head counts")
    if cfg.contrastive not in ("audiocon", "supcon", "none"):
        problems.append(f"unknown contrastive mode {cfg.contrastive!r}")
    return problems


def default_config(resolution: int = 64, **overrides) -> ModelConfig:
    if resolution % 16:
        raise ConfigError(f"resolution {resolution} not divisible by 16")
    return ModelConfig(resolution=resolution, **overrides)


def load_config(path) -> ModelConfig:
    """Read a flat JSON or YAML key/value file. Unknown keys are an error."""
    path = Path(path)
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    return config_from_dict(data)


def config_from_dict(data: dict) -> ModelConfig:
    if not isinstance(data, dict):
        raise ConfigError("config document must be a flat mapping")
    data = dict(data)
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    derived = {}
    for key in ("H_prime", "W_prime"):
        if key in data:
            derived[key] = data.pop(key)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    for key, value in data.items():
        if isinstance(value, (dict, list)) and key not in ("strides", "patch_sizes", "loss_weights", "betas"):
            raise ConfigError(f"config key {key!r} must be a scalar")
    cfg = ModelConfig(**data)
    for key, value in derived.items():
        if value != getattr(cfg, key):
            raise ConfigError(f"{key}={value} inconsistent with resolution {cfg.resolution}")
    return cfg


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


@dataclass(frozen=True)
class VideoClip:
    """One clip: B frames, a stereo waveform, per-frame masks and optional text."""

    frames: np.ndarray  # B x H x W x 3, float in [0, 1]
    waveform: np.ndarray  # N_a x 2 at 16 kHz
    masks: np.ndarray  # B x H x W, int
    clip_id: str = ""
    text_tokens: Optional[Sequence[int]] = None
    label_set: tuple = (0, 1)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("frames", "waveform", "masks"):
            arr = getattr(self, name)
            arr = np.array(arr, copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.text_tokens is not None:
            object.__setattr__(self, "text_tokens", tuple(int(t) for t in self.text_tokens))

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    def with_(self, **changes) -> "VideoClip":
        return dataclasses.replace(self, **changes)


@dataclass
class ValidationReport:
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_clip(clip: VideoClip, config: ModelConfig) -> ValidationReport:
    """Check a clip against the config. Reports problems, never raises."""
    v = []
    frames, masks, wave = clip.frames, clip.masks, clip.waveform
    if frames.ndim != 4 or frames.shape[-1] != 3:
        v.append("frames must be B x H x W x 3")
        return ValidationReport(v)
    B, H, W, _ = frames.shape
    if B < 1:
        v.append("at least one frame")
    if H % 16 or W % 16:
        v.append("resolution divisibility")
    if H != config.resolution or W != config.resolution:
        v.append("resolution mismatch with config")
    if frames.size and (np.nanmin(frames) < 0 or np.nanmax(frames) > 1 or not np.isfinite(frames).all()):
        v.append("frame values outside [0, 1]")
    if masks.shape != (B, H, W):
        v.append("mask/frame shape mismatch")
    elif masks.size and not np.isin(masks, np.asarray(clip.label_set)).all():
        v.append("mask values outside label set")
    if wave.ndim != 2 or wave.shape[1] != 2:
        v.append("waveform must be N x 2 stereo")
    elif wave.shape[0] < B * SAMPLE_RATE:
        v.append("waveform shorter than one second per frame")
    if clip.text_tokens is not None and any(
        t < 0 or t >= config.text_vocab for t in clip.text_tokens
    ):
        v.append("text token outside vocabulary")
    return ValidationReport(v)
