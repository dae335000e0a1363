"""Ground-truth point/box prompts and combined audio + visual-prompt inference."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .decoder import BOX_CORNER_A, BOX_CORNER_B, POINT_POSITIVE, PROMPT_PAD, select_mask
from .model import Ablation, AudioVisualSegmenter, clip_tensors

MODES = ("points", "box", "points+box", "audio", "audio+points+box")


@dataclass
class VisualPrompts:
    points: List[tuple] = field(default_factory=list)  # (x, y, positive)
    box: Optional[tuple] = None  # (x0, y0, x1, y1), inclusive
    frame_index: int = 0

    @property
    def empty(self) -> bool:
        return not self.points and self.box is None

    def subset(self, use_points=True, use_box=True) -> "VisualPrompts":
        return VisualPrompts(list(self.points) if use_points else [], self.box if use_box else None, self.frame_index)

    def to_record(self) -> dict:
        return {
            "frame_index": self.frame_index,
            "points": [[int(x), int(y), bool(p)] for x, y, p in self.points],
            "box": None if self.box is None else [int(v) for v in self.box],
        }

    @classmethod
    def from_record(cls, rec) -> "VisualPrompts":
        return cls(
            [(int(x), int(y), bool(p)) for x, y, p in rec.get("points", [])],
            None if rec.get("box") is None else tuple(int(v) for v in rec["box"]),
            int(rec.get("frame_index", 0)),
        )


def gt_prompts(gt_mask, n_points: int = 4, seed: int = 0, frame_index: int = 0) -> VisualPrompts:
    """Uniformly sampled positive points on the foreground plus its tight box."""
    fg = np.argwhere(np.asarray(gt_mask) > 0)  # rows of (y, x)
    if len(fg) == 0:
        return VisualPrompts(frame_index=frame_index)
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(fg), size=n_points, replace=len(fg) < n_points)
    points = [(int(fg[i, 1]), int(fg[i, 0]), True) for i in pick]
    y0, x0 = fg.min(axis=0)
    y1, x1 = fg.max(axis=0)
    return VisualPrompts(points, (int(x0), int(y0), int(x1), int(y1)), frame_index)


def write_prompt_file(path, records: Dict[str, List[VisualPrompts]]) -> None:
    """JSON lines: {"clip_id": ..., "prompts": [{"frame_index", "points", "box"}, ...]}"""
    with open(path, "w", encoding="utf-8") as fh:
        for cid, prompts in records.items():
            fh.write(json.dumps({"clip_id": cid, "prompts": [p.to_record() for p in prompts]}) + "\n")


def read_prompt_file(path) -> Dict[str, List[VisualPrompts]]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            out[rec["clip_id"]] = [VisualPrompts.from_record(r) for r in rec["prompts"]]
    return out


def prompt_tensors(prompts: Sequence[Optional[VisualPrompts]], B: int, size: int):
    """Pack per-frame prompts into padded coordinate/type tensors (B x M x 2, B x M)."""
    per_frame = [[] for _ in range(B)]
    for p in prompts:
        if p is None:
            continue
        if not 0 <= p.frame_index < B:
            raise ValueError(f"prompt frame index {p.frame_index} outside clip of {B} frames")
        items = per_frame[p.frame_index]
        for x, y, _pos in p.points:
            items.append((x, y, POINT_POSITIVE))
        if p.box is not None:
            x0, y0, x1, y1 = p.box
            items += [(x0, y0, BOX_CORNER_A), (x1, y1, BOX_CORNER_B)]
    for items in per_frame:
        for x, y, _ in items:
            if not (0 <= x < size and 0 <= y < size):
                raise ValueError(f"prompt coordinate ({x}, {y}) outside {size}x{size} frame")
    M = max(len(i) for i in per_frame)
    if M == 0:
        return None, None
    coords = torch.zeros(B, M, 2, dtype=torch.long)
    types = torch.full((B, M), PROMPT_PAD, dtype=torch.long)
    for b, items in enumerate(per_frame):
        for m, (x, y, t) in enumerate(items):
            coords[b, m] = torch.tensor([x, y])
            types[b, m] = t
    return coords, types


@dataclass
class CombinedResult:
    masks: np.ndarray  # B x H x W bool
    selected: np.ndarray  # B
    iou_pred: np.ndarray  # B
    encoder_passes: int
    decoder_passes: int


@torch.no_grad()
def combined_inference(
    model: AudioVisualSegmenter,
    clip,
    prompts: Optional[Sequence[VisualPrompts]] = None,
    use_audio: bool = True,
    ablation: Optional[Ablation] = None,
) -> CombinedResult:
    """One encoder pass and one decoder pass per frame.

    The decoder receives the audio prompt bundle (when ``use_audio``) and the
    embedded visual prompts together, and the best candidate per frame is
    picked by predicted IoU.
    """
    frames, wave, _ = clip_tensors(clip, model.dtype)
    B = frames.shape[0]
    before = model.counters()
    prompt_tokens = None
    if prompts:
        coords, types = prompt_tensors(prompts, B, model.config.resolution)
        if coords is not None:
            prompt_tokens = model.decoder.prompt_embedder(coords, types)
    out = model(frames, wave, clip.text_tokens, ablation=ablation, prompt_tokens=prompt_tokens, use_audio=use_audio)
    idx = select_mask(out.outputs, "inference")
    rows = torch.arange(B)
    masks = (out.outputs.mask_logits[rows, idx] > 0).numpy()
    after = model.counters()
    return CombinedResult(
        masks,
        idx.numpy(),
        out.outputs.iou_pred[rows, idx].numpy(),
        after["encoder_passes"] - before["encoder_passes"],
        after["decoder_passes"] - before["decoder_passes"],
    )


def mode_flags(mode: str):
    if mode not in MODES:
        raise ValueError(f"unknown prompt mode {mode!r}; expected one of {MODES}")
    parts = set(mode.split("+"))
    return "audio" in parts, "points" in parts, "box" in parts


def clip_prompts(clip, mode: str, seed: int = 0) -> List[VisualPrompts]:
    """Per-frame ground-truth prompts for ``mode`` (empty frames get none)."""
    _, use_points, use_box = mode_flags(mode)
    if not (use_points or use_box):
        return []
    out = []
    for b in range(clip.num_frames):
        p = gt_prompts(clip.masks[b], seed=seed + b, frame_index=b)
        if not p.empty:
            out.append(p.subset(use_points, use_box))
    return out


@dataclass
class ThroughputResult:
    fps: float
    frames: int
    encoder_passes: int
    decoder_passes: int


def measure_throughput(model, clips, mode: str = "audio", warmup_frames: int = 10, seed: int = 0) -> ThroughputResult:
    """Frames per second over one timed sweep of ``clips``, after at least
    ``warmup_frames`` untimed frames."""
    clips = list(clips)
    if not clips:
        raise ValueError("empty clip set")
    use_audio, _, _ = mode_flags(mode)
    prepared = [(c, clip_prompts(c, mode, seed)) for c in clips]
    done = 0
    while done < warmup_frames:
        for c, p in prepared:
            combined_inference(model, c, p, use_audio)
            done += c.num_frames
            if done >= warmup_frames:
                break
    frames = enc = dec = 0
    start = time.perf_counter()
    for c, p in prepared:
        r = combined_inference(model, c, p, use_audio)
        frames += c.num_frames
        enc += r.encoder_passes
        dec += r.decoder_passes
    elapsed = max(time.perf_counter() - start, 1e-9)
    return ThroughputResult(frames / elapsed, frames, enc, dec)
