"""Clip ingestion from disk, the synthetic sounding-shapes generator and augmentation.

On-disk layout, one directory per clip::

    root/split/clip_id/frames/00000.png ...
    root/split/clip_id/masks/00000.png ...
    root/split/clip_id/audio.wav          16-bit PCM, 16 kHz, stereo
    root/split/clip_id/expression.txt     optional, one UTF-8 sentence
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional

import numpy as np
from PIL import Image
from scipy.io import wavfile
from scipy.signal import resample_poly

from .core import SAMPLE_RATE, ModelConfig, VideoClip

CIRCLE_HZ = 440.0
SQUARE_HZ = 880.0


class DatasetError(Exception):
    def __init__(self, clip_id, message, path=None):
        self.clip_id = clip_id
        self.path = path
        where = f" ({path})" if path else ""
        super().__init__(f"clip {clip_id}: {message}{where}")


class MissingFileError(DatasetError):
    pass


class CorruptAudioError(DatasetError):
    pass


class CountMismatchError(DatasetError):
    pass


@dataclass
class ClipDescriptor:
    clip_id: str
    frame_paths: List[Path]
    mask_paths: List[Path]
    audio_path: Path
    expression_path: Optional[Path] = None


@dataclass
class DatasetManifest:
    root: Path
    split: str
    clips: List[ClipDescriptor] = field(default_factory=list)
    label_set: tuple = (0, 1)


def build_manifest(root, split) -> DatasetManifest:
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise FileNotFoundError(f"no split directory {split_dir}")
    manifest = DatasetManifest(Path(root), split)
    for clip_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        cid = clip_dir.name
        frames = sorted((clip_dir / "frames").glob("*.png"))
        masks_dir = clip_dir / "masks"
        audio = clip_dir / "audio.wav"
        if not frames:
            raise MissingFileError(cid, "no frames", clip_dir / "frames")
        if not audio.is_file():
            raise MissingFileError(cid, "missing audio", audio)
        masks = [masks_dir / f.name for f in frames]
        for m in masks:
            if not m.is_file():
                raise MissingFileError(cid, "missing mask", m)
        extra = sorted(set(masks_dir.glob("*.png")) - set(masks))
        if extra:
            raise CountMismatchError(cid, f"{len(frames)} frames but {len(frames) + len(extra)} masks")
        expr = clip_dir / "expression.txt"
        manifest.clips.append(ClipDescriptor(cid, frames, masks, audio, expr if expr.is_file() else None))
    return manifest


def read_wav(path, clip_id="?") -> np.ndarray:
    """Float waveform N x 2 at 16 kHz."""
    try:
        rate, data = wavfile.read(str(path))
    except Exception as exc:  # scipy raises ValueError / struct errors on bad files
        raise CorruptAudioError(clip_id, f"unreadable audio: {exc}", path) from exc
    if data.size == 0:
        raise CorruptAudioError(clip_id, "empty audio", path)
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2**31
    elif data.dtype == np.uint8:
        data = (data.astype(np.float64) - 128) / 128.0
    else:
        data = data.astype(np.float64)
    if data.ndim == 1:
        data = np.stack([data, data], axis=1)
    data = data[:, :2] if data.shape[1] >= 2 else np.repeat(data, 2, axis=1)
    if rate != SAMPLE_RATE:
        g = math.gcd(int(rate), SAMPLE_RATE)
        data = resample_poly(data, SAMPLE_RATE // g, int(rate) // g, axis=0)
    return data.astype(np.float32)


def write_wav(path, waveform) -> None:
    pcm = np.clip(np.round(np.asarray(waveform) * 32767), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), SAMPLE_RATE, pcm)


def _load_image(path, size, resample, mode):
    img = Image.open(path).convert(mode)
    if img.size != (size, size):
        img = img.resize((size, size), resample)
    return np.asarray(img)


def load_clip(desc: ClipDescriptor, config: ModelConfig, tokenizer=None, binarize=True) -> VideoClip:
    R = config.resolution
    frames = np.stack(
        [_load_image(p, R, Image.BILINEAR, "RGB") for p in desc.frame_paths]
    ).astype(np.float32) / 255.0
    masks = np.stack([_load_image(p, R, Image.NEAREST, "L") for p in desc.mask_paths]).astype(np.int64)
    if binarize:
        masks = (masks >= 128).astype(np.int64)
        label_set = (0, 1)
    else:
        label_set = tuple(int(v) for v in np.unique(masks))
    wave = read_wav(desc.audio_path, desc.clip_id)
    B = frames.shape[0]
    if wave.shape[0] < B * SAMPLE_RATE:
        raise CorruptAudioError(desc.clip_id, f"audio covers {wave.shape[0] / SAMPLE_RATE:.2f}s, need {B}s", desc.audio_path)
    tokens = None
    text = None
    if desc.expression_path is not None:
        text = desc.expression_path.read_text(encoding="utf-8").strip()
        if tokenizer is not None:
            tokens = tokenizer(text)
    return VideoClip(frames, wave, masks, desc.clip_id, tokens, label_set, meta={"expression": text})


def load_dataset(root, split, config: ModelConfig, tokenizer=None, binarize=True) -> Iterator[VideoClip]:
    manifest = build_manifest(root, split)
    for desc in manifest.clips:
        yield load_clip(desc, config, tokenizer, binarize)


def _hsv_to_rgb(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def render_clip(rng: np.random.Generator, B: int, R: int, colors: str = "family"):
    """Draw one clip of two moving shapes. Returns frames (uint8), masks for
    circle and square (bool, B x R x R each), and the sounding shape."""
    r = rng.uniform(0.12, 0.18) * R
    h = r * math.sqrt(math.pi) / 2 * rng.uniform(0.9, 1.1)
    for _ in range(1000):
        c0, c1 = rng.uniform(r + 1, R - r - 1, size=(2, 2))
        s0, s1 = rng.uniform(h + 1, R - h - 1, size=(2, 2))
        t = np.linspace(0, 1, B)[:, None] if B > 1 else np.zeros((1, 1))
        cpos = c0 + t * (c1 - c0)
        spos = s0 + t * (s1 - s0)
        if np.all(np.linalg.norm(cpos - spos, axis=1) > r + h * math.sqrt(2) + 2):
            break
    if colors == "family":
        # each shape keeps to its own hue band: warm circles, cool squares
        hue_c = rng.uniform(-0.08, 0.08) % 1.0
        hue_s = rng.uniform(0.5, 0.66)
    else:
        hue_c = rng.uniform()
        hue_s = (hue_c + rng.uniform(0.25, 0.75)) % 1.0
    col_c = np.array(_hsv_to_rgb(hue_c, rng.uniform(0.6, 1.0), rng.uniform(0.7, 1.0)))
    col_s = np.array(_hsv_to_rgb(hue_s, rng.uniform(0.6, 1.0), rng.uniform(0.7, 1.0)))
    bg = rng.uniform(0.0, 0.3, size=3)

    yy, xx = np.mgrid[0:R, 0:R] + 0.5
    frames = np.empty((B, R, R, 3), np.float64)
    circle = np.zeros((B, R, R), bool)
    square = np.zeros((B, R, R), bool)
    for b in range(B):
        circle[b] = (xx - cpos[b, 0]) ** 2 + (yy - cpos[b, 1]) ** 2 <= r * r
        square[b] = (np.abs(xx - spos[b, 0]) <= h) & (np.abs(yy - spos[b, 1]) <= h)
        img = bg + rng.normal(0, 0.03, size=(R, R, 3))
        img[circle[b]] = col_c
        img[square[b]] = col_s
        frames[b] = img
    frames = (np.clip(frames, 0, 1) * 255).round().astype(np.uint8)
    sounding = "circle" if rng.uniform() < 0.5 else "square"
    return frames, circle, square, sounding


def tone(rng: np.random.Generator, freq: float, seconds: int) -> np.ndarray:
    n = seconds * SAMPLE_RATE
    t = np.arange(n) / SAMPLE_RATE
    amp = rng.uniform(0.3, 0.6)
    wave = amp * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    gains = rng.uniform(0.8, 1.2, size=2)
    stereo = wave[:, None] * gains[None, :] + rng.normal(0, 0.01, size=(n, 2))
    return np.clip(stereo, -1, 1)


def synth_generate(root, n_clips: int, B: int = 2, resolution: int = 64, seed: int = 0, split: str = "train", expression: Optional[str] = None, colors: str = "family") -> Path:
    """Write ``n_clips`` sounding-shape clips to ``root/split``.

    Each clip has a circle and a square moving on straight lines; a 440 Hz tone
    means the circle sounds, 880 Hz the square. Which one sounds is drawn per
    clip, so appearance alone does not reveal the target.
    """
    if resolution % 16:
        raise ValueError(f"resolution {resolution} not divisible by 16")
    out = Path(root) / split
    out.mkdir(parents=True, exist_ok=True)
    for i in range(n_clips):
        rng = np.random.default_rng([seed, i])
        frames, circle, square, sounding = render_clip(rng, B, resolution, colors)
        mask = circle if sounding == "circle" else square
        freq = CIRCLE_HZ if sounding == "circle" else SQUARE_HZ
        wave = tone(rng, freq, B)
        cdir = out / f"clip_{i:05d}"
        (cdir / "frames").mkdir(parents=True, exist_ok=True)
        (cdir / "masks").mkdir(parents=True, exist_ok=True)
        for b in range(B):
            Image.fromarray(frames[b]).save(cdir / "frames" / f"{b:05d}.png")
            Image.fromarray((mask[b] * 255).astype(np.uint8)).save(cdir / "masks" / f"{b:05d}.png")
        write_wav(cdir / "audio.wav", wave)
        if expression is not None:
            (cdir / "expression.txt").write_text(expression + "\n", encoding="utf-8")
        (cdir / "meta.json").write_text(json.dumps({"sounding": sounding, "freq": freq}))
    return out


@dataclass(frozen=True)
class AugmentConfig:
    p_clip_jitter: float = 0.8
    p_frame_jitter: float = 0.5
    p_flip: float = 0.5
    p_gray: float = 0.1
    strength: float = 0.2

    @classmethod
    def off(cls):
        return cls(0.0, 0.0, 0.0, 0.0)


def _gray(x):
    return (x @ np.array([0.299, 0.587, 0.114]))[..., None]


def _jitter(x, rng, strength):
    lo, hi = 1 - strength, 1 + strength
    b, c, s = rng.uniform(lo, hi, size=3)
    x = x * b
    x = x.mean(axis=(-3, -2, -1), keepdims=True) + c * (x - x.mean(axis=(-3, -2, -1), keepdims=True))
    g = _gray(x)
    x = g + s * (x - g)
    return np.clip(x, 0, 1)


def augment(clip: VideoClip, seed: int, cfg: AugmentConfig = AugmentConfig()) -> VideoClip:
    """Colour jitter (clip and frame level), horizontal flip and grayscale.

    Geometry is shared between frames and masks. Audio is left untouched.
    """
    rng = np.random.default_rng(seed)
    frames = np.asarray(clip.frames, np.float64)
    masks = np.asarray(clip.masks)
    draws = rng.uniform(size=3)
    changed = False
    if draws[0] < cfg.p_clip_jitter:
        frames = _jitter(frames, rng, cfg.strength)
        changed = True
    if cfg.p_frame_jitter > 0:
        frames = frames.copy()
        for b in range(frames.shape[0]):
            if rng.uniform() < cfg.p_frame_jitter:
                frames[b] = _jitter(frames[b], rng, cfg.strength)
                changed = True
    if draws[1] < cfg.p_flip:
        frames = frames[:, :, ::-1]
        masks = masks[:, :, ::-1]
        changed = True
    if draws[2] < cfg.p_gray:
        frames = np.repeat(_gray(frames), 3, axis=-1)
        changed = True
    if not changed:
        return clip
    return clip.with_(frames=np.ascontiguousarray(frames, dtype=np.float32), masks=np.ascontiguousarray(masks))
