"""Backbones that feed the fuser: visual pyramid, audio and text encoders.

The visual and text encoders are stand-ins for pretrained checkpoints and are
frozen; the audio encoder is trained together with the fuser.
"""

from __future__ import annotations

import math
import re
import zlib
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import SAMPLE_RATE, ModelConfig


@dataclass
class PyramidFeatures:
    # level k is B x H/s_k x W/s_k x L, ascending stride
    levels: List[torch.Tensor]
    strides: tuple = (4, 8, 16)

    def __post_init__(self):
        if len(self.levels) != 3:
            raise ValueError("pyramid must have exactly 3 levels")
        B, L = self.levels[0].shape[0], self.levels[0].shape[-1]
        for lvl in self.levels:
            if lvl.shape[0] != B or lvl.shape[-1] != L:
                raise ValueError("pyramid levels must share B and L")


@dataclass
class ConditioningSequence:
    z_a: torch.Tensor  # B x L
    z_t: Optional[torch.Tensor]  # N_t x L
    z_c: torch.Tensor  # (B + N_t) x L

    @property
    def num_frames(self) -> int:
        return self.z_a.shape[0]


class LayerNorm2d(nn.Module):
    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class VisualBackbone(nn.Module):
    """Adapter seam for hierarchical image encoders.

    Subclasses take B x 3 x H x W images and return three NCHW feature maps at
    the declared ``strides`` with ``width`` channels each.
    """

    strides = (4, 8, 16)
    width: int


class ConvPyramidEncoder(VisualBackbone):
    """Strided-conv hierarchy: a stride-4 stem followed by two stride-2 stages."""

    def __init__(self, width: int):
        super().__init__()
        self.width = width
        self.stem = nn.Sequential(
            nn.Conv2d(3, width, kernel_size=4, stride=4),
            nn.GELU(),
            nn.Conv2d(width, width, kernel_size=3, padding=1),
        )
        self.stage2 = nn.Sequential(nn.GELU(), nn.Conv2d(width, width, kernel_size=3, stride=2, padding=1))
        self.stage3 = nn.Sequential(nn.GELU(), nn.Conv2d(width, width, kernel_size=3, stride=2, padding=1))
        self.norms = nn.ModuleList([LayerNorm2d(width) for _ in range(3)])

    def forward(self, images):
        x = (images - 0.45) / 0.25
        f1 = self.stem(x)
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        return [n(f) for n, f in zip(self.norms, (f1, f2, f3))]


def encode_visual_pyramid(backbone: VisualBackbone, frames: torch.Tensor) -> PyramidFeatures:
    """Run the frozen backbone on B x H x W x 3 frames and return channel-last taps."""
    B, H, W, _ = frames.shape
    if H % 16 or W % 16:
        raise ValueError(f"frame size {H}x{W} not divisible by 16")
    with torch.no_grad():
        taps = backbone(frames.permute(0, 3, 1, 2))
    levels = []
    for tap, s in zip(taps, backbone.strides):
        if tap.shape[-2:] != (H // s, W // s) or tap.shape[1] != backbone.width:
            raise ValueError(f"backbone tap at stride {s} has shape {tuple(tap.shape)}")
        levels.append(tap.permute(0, 2, 3, 1).contiguous())
    return PyramidFeatures(levels, tuple(backbone.strides))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels, n_fft, sample_rate=SAMPLE_RATE, fmin=125.0, fmax=7500.0):
    """Triangular HTK-style mel filters, shape n_mels x (n_fft // 2 + 1)."""
    bins = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, bins.size))
    for i in range(n_mels):
        lo, mid, hi = edges[i : i + 3]
        up = (bins - lo) / (mid - lo)
        down = (hi - bins) / (hi - mid)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


class LogMelAudioEncoder(nn.Module):
    """Log-mel spectrogram (25 ms window, 10 ms hop) and a small conv head.

    Produces one L-vector per one-second window of the mono-mixed waveform.
    """

    win = 400
    hop = 160
    n_fft = 512

    def __init__(self, width: int, n_mels: int = 64):
        super().__init__()
        self.register_buffer("mel_fb", torch.tensor(mel_filterbank(n_mels, self.n_fft), dtype=torch.float32))
        self.register_buffer("window", torch.hann_window(self.win, periodic=True))
        self.conv = nn.Sequential(
            nn.Conv2d(1, 16, kernel_size=3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(16, 32, kernel_size=3, stride=2, padding=1),
            nn.GELU(),
        )
        freq = math.ceil(math.ceil(n_mels / 2) / 2)
        self.head = nn.Sequential(nn.Linear(32 * freq, 128), nn.GELU(), nn.Linear(128, width))

    def log_mel(self, windows):
        # windows: B x 16000 mono
        spec = torch.stft(
            windows,
            n_fft=self.n_fft,
            hop_length=self.hop,
            win_length=self.win,
            window=self.window.to(windows.dtype),
            center=False,
            return_complex=True,
        )
        power = spec.real**2 + spec.imag**2  # B x F x T
        mel = torch.einsum("mf,bft->btm", self.mel_fb.to(power.dtype), power)
        return torch.log(mel + 0.01)

    def forward(self, waveform, num_frames):
        """waveform: N x 2 tensor; returns num_frames x L."""
        need = num_frames * SAMPLE_RATE
        if waveform.shape[0] < need:
            raise ValueError(f"waveform has {waveform.shape[0]} samples, need {need} for {num_frames} windows")
        mono = waveform[:need].mean(dim=1)
        feats = self.log_mel(mono.reshape(num_frames, SAMPLE_RATE)).unsqueeze(1)
        x = self.conv(feats)  # B x 32 x T' x F'
        x = x.mean(dim=2).flatten(1)
        return self.head(x)


_WORD = re.compile(r"[a-z0-9']+")


def tokenize(text: str, vocab: int) -> List[int]:
    """Stable hashing tokenizer; id 0 is reserved."""
    return [1 + zlib.crc32(w.encode()) % (vocab - 1) for w in _WORD.findall(text.lower())]


class TextEncoder(nn.Module):
    """Frozen token table followed by a fixed orthogonal projection."""

    def __init__(self, vocab: int, width: int):
        super().__init__()
        self.vocab = vocab
        self.embed = nn.Embedding(vocab, width)
        self.proj = nn.Linear(width, width, bias=False)
        nn.init.orthogonal_(self.proj.weight)

    def tokenize(self, text: str) -> List[int]:
        return tokenize(text, self.vocab)

    def forward(self, tokens):
        return self.proj(self.embed(tokens))


def encode_conditioning(
    audio_encoder: LogMelAudioEncoder,
    waveform: torch.Tensor,
    num_frames: int,
    text_encoder: Optional[TextEncoder] = None,
    text_tokens: Optional[Sequence[int]] = None,
) -> ConditioningSequence:
    z_a = audio_encoder(waveform, num_frames)
    z_t = None
    if text_tokens is not None and len(text_tokens) and text_encoder is not None:
        ids = torch.as_tensor(list(text_tokens), dtype=torch.long)
        if int(ids.min()) < 0 or int(ids.max()) >= text_encoder.vocab:
            raise ValueError("text token outside vocabulary")
        z_t = text_encoder(ids).to(z_a.dtype)
    z_c = z_a if z_t is None else torch.cat([z_a, z_t], dim=0)
    return ConditioningSequence(z_a=z_a, z_t=z_t, z_c=z_c)


def build_encoders(config: ModelConfig):
    visual = ConvPyramidEncoder(config.L)
    audio = LogMelAudioEncoder(config.L, config.n_mels)
    text = TextEncoder(config.text_vocab, config.L)
    for module in (visual, text):
        module.requires_grad_(False)
        module.eval()
    return visual, audio, text
