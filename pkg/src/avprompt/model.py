"""Full model: frozen encoder/decoder, trainable audio encoder, fuser and projectors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .core import ModelConfig, VideoClip
from .decoder import DecoderOutputs, MaskDecoder
from .encoders import (
    ConditioningSequence,
    PyramidFeatures,
    build_encoders,
    encode_conditioning,
    encode_visual_pyramid,
)
from .fuser import AuralFuser, PromptBundle
from .losses import ProjectionHeads

GROUPS = ("encoder_frozen", "decoder_frozen", "audio_encoder", "fuser", "projectors")
TRAINABLE_GROUPS = frozenset({"audio_encoder", "fuser", "projectors"})


@dataclass(frozen=True)
class Ablation:
    zero_sparse: bool = False
    zero_dense: bool = False
    audio_off: bool = False
    text_off: bool = False
    pyramid_levels: Optional[int] = None


@dataclass
class ForwardOutput:
    pyramid: PyramidFeatures
    cond: Optional[ConditioningSequence]
    bundle: Optional[PromptBundle]
    outputs: DecoderOutputs


class AudioVisualSegmenter(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.visual_encoder, self.audio_encoder, self.text_encoder = build_encoders(config)
            self.decoder = MaskDecoder(config)
            self.fuser = AuralFuser(config)
            self.projectors = ProjectionHeads(config.L, config.proj_dim)
        self.decoder.requires_grad_(False)
        self.encoder_passes = 0
        self.train(False)

    @property
    def dtype(self):
        return self.decoder.output_tokens.weight.dtype

    def groups(self):
        return {
            "encoder_frozen": nn.ModuleList([self.visual_encoder, self.text_encoder]),
            "decoder_frozen": self.decoder,
            "audio_encoder": self.audio_encoder,
            "fuser": self.fuser,
            "projectors": self.projectors,
        }

    def trainable_groups(self):
        return {name for name, m in self.groups().items() if any(p.requires_grad for p in m.parameters())}

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen parts always run in inference mode
        self.visual_encoder.eval()
        self.text_encoder.eval()
        self.decoder.eval()
        return self

    def reset_counters(self):
        self.encoder_passes = 0
        self.decoder.passes = 0
        self.fuser.level_passes = 0

    def counters(self):
        return {
            "encoder_passes": self.encoder_passes,
            "decoder_passes": self.decoder.passes,
            "fuser_level_passes": self.fuser.level_passes,
        }

    def encode(self, frames: torch.Tensor) -> PyramidFeatures:
        pyr = encode_visual_pyramid(self.visual_encoder, frames)
        self.encoder_passes += frames.shape[0]
        return pyr

    def make_prompts(self, pyramid, waveform, text_tokens=None, ablation: Optional[Ablation] = None):
        ab = ablation or Ablation()
        B = pyramid.levels[0].shape[0]
        tokens = None if ab.text_off else text_tokens
        cond = encode_conditioning(self.audio_encoder, waveform, B, self.text_encoder, tokens)
        if ab.audio_off:
            z_a = torch.zeros_like(cond.z_a)
            z_c = z_a if cond.z_t is None else torch.cat([z_a, cond.z_t])
            cond = ConditioningSequence(z_a, cond.z_t, z_c)
        bundle = self.fuser(pyramid, cond, ab.pyramid_levels)
        if ab.zero_sparse:
            bundle = bundle.without_sparse()
        if ab.zero_dense:
            bundle = bundle.without_dense()
        return cond, bundle

    def decode(self, pyramid, bundle=None, prompt_tokens=None, trace=None) -> DecoderOutputs:
        return self.decoder(pyramid.levels[2], pyramid.levels[:2], bundle, prompt_tokens, trace)

    def forward(
        self,
        frames,
        waveform=None,
        text_tokens: Optional[Sequence[int]] = None,
        ablation: Optional[Ablation] = None,
        prompt_tokens=None,
        use_audio: bool = True,
    ) -> ForwardOutput:
        pyramid = self.encode(frames)
        cond = bundle = None
        if use_audio:
            cond, bundle = self.make_prompts(pyramid, waveform, text_tokens, ablation)
        outputs = self.decode(pyramid, bundle, prompt_tokens)
        return ForwardOutput(pyramid, cond, bundle, outputs)


def clip_tensors(clip: VideoClip, dtype=torch.float32):
    frames = torch.as_tensor(np.array(clip.frames), dtype=dtype)
    wave = torch.as_tensor(np.array(clip.waveform), dtype=dtype)
    gt = torch.as_tensor(np.array(clip.masks), dtype=torch.long)
    return frames, wave, gt


def set_trainable(model: AudioVisualSegmenter):
    """Enforce the freezing contract: only the trainable groups take gradients."""
    for name, module in model.groups().items():
        module.requires_grad_(name in TRAINABLE_GROUPS)


def audit_trainable_groups(model: AudioVisualSegmenter):
    found = model.trainable_groups()
    if found != TRAINABLE_GROUPS:
        raise RuntimeError(f"trainable groups {sorted(found)} != {sorted(TRAINABLE_GROUPS)}")
    return sorted(found)
