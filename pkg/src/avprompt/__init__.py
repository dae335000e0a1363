"""Audio-conditioned feature-level prompting for a frozen promptable mask decoder."""

from .core import ModelConfig, VideoClip, default_config, load_config, validate_clip
from .model import Ablation, AudioVisualSegmenter

__all__ = [
    "Ablation",
    "AudioVisualSegmenter",
    "ModelConfig",
    "VideoClip",
    "default_config",
    "load_config",
    "validate_clip",
]
__version__ = "0.1.0"
