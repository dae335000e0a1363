"""Training loop, evaluation, prompt simulation and checkpoint I/O."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch

from .core import ModelConfig, VideoClip, config_from_dict
from .datasets import AugmentConfig, augment
from .losses import total_loss
from .metrics import EvalReport, eval_metrics
from .model import Ablation, AudioVisualSegmenter, audit_trainable_groups, set_trainable
from .prompts_sim import MODES, clip_prompts, combined_inference, measure_throughput

log = logging.getLogger("avprompt")

CKPT_FORMAT = "avprompt-checkpoint-1"
EVAL_FLAGS = ("pyramid_levels", "zero_sparse", "zero_dense", "audio_off", "text_off", "shuffle_audio")


class ConfigHashMismatch(RuntimeError):
    pass


def poly_lr(step: int, max_steps: int, base_lr: float, power: float = 0.9) -> float:
    frac = 1.0 - step / max(max_steps, 1)
    return base_lr * max(frac, 0.0) ** power


@dataclass
class RunState:
    step: int = 0
    lr: float = 0.0
    config_hash: str = ""
    best_metric: float = float("-inf")
    best_step: int = -1


@dataclass
class TrainResult:
    model: AudioVisualSegmenter
    records: List[dict]
    state: RunState
    checkpoint: Optional[Path] = None
    best_checkpoint: Optional[Path] = None


def save_checkpoint(path, model: AudioVisualSegmenter, state: Optional[RunState] = None, optimizer=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CKPT_FORMAT,
        "config": model.config.to_dict(),
        "config_hash": model.config.hash(),
        "seed": model.seed,
        "groups": {name: m.state_dict() for name, m in model.groups().items()},
        "run_state": None if state is None else state.__dict__,
        "optimizer": None if optimizer is None else optimizer.state_dict(),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, expected: Optional[ModelConfig] = None, with_state=False):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint written by this package")
    cfg = config_from_dict(payload["config"])
    if cfg.hash() != payload["config_hash"]:
        raise ConfigHashMismatch(f"{path}: stored config does not match its hash")
    if expected is not None and expected.hash() != payload["config_hash"]:
        raise ConfigHashMismatch(
            f"{path}: checkpoint config hash {payload['config_hash']} != requested {expected.hash()}"
        )
    model = AudioVisualSegmenter(cfg, payload.get("seed", 0))
    groups = model.groups()
    for name, sd in payload["groups"].items():
        groups[name].load_state_dict(sd)
    if with_state:
        return model, payload
    return model


def _step_record(step, lr, breakdown):
    rec = {"step": step, "lr": lr}
    for k in ("focal", "dice", "iou", "occ", "ctrs", "total"):
        rec[k] = float(breakdown[k].detach())
    return rec


def run_train(
    config: ModelConfig,
    clips: Sequence[VideoClip],
    max_steps: int,
    seed: int = 0,
    out_dir=None,
    val_clips: Optional[Sequence[VideoClip]] = None,
    val_every: int = 0,
    augment_cfg: Optional[AugmentConfig] = AugmentConfig(),
    resume=None,
    log_path=None,
    model: Optional[AudioVisualSegmenter] = None,
) -> TrainResult:
    """AdamW with poly decay over the trainable groups, one clip per step."""
    clips = list(clips)
    if not clips:
        raise ValueError("training set is empty")
    torch.manual_seed(seed)
    optimizer_state = None
    state = RunState(config_hash=config.hash())
    if resume is not None:
        model, payload = load_checkpoint(resume, expected=config, with_state=True)
        if payload.get("run_state"):
            state = RunState(**payload["run_state"])
        optimizer_state = payload.get("optimizer")
    elif model is None:
        model = AudioVisualSegmenter(config, seed)
    set_trainable(model)
    groups = audit_trainable_groups(model)
    log.info(json.dumps({"event": "trainable_groups", "groups": groups}))

    params = model.trainable_parameters()
    opt = torch.optim.AdamW(params, lr=config.lr, betas=tuple(config.betas), weight_decay=config.weight_decay)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)

    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    order: List[int] = []
    records = []
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    best_path = None
    # replay the data stream so a resumed run sees the same clips
    for _ in range(state.step):
        if not order:
            order = list(rng.permutation(len(clips)))
        order.pop()
        rng.integers(2**31)

    try:
        model.train(True)
        while state.step < max_steps:
            if not order:
                order = list(rng.permutation(len(clips)))
            clip = clips[order.pop()]
            aug_seed = int(rng.integers(2**31))
            if augment_cfg is not None:
                clip = augment(clip, aug_seed, augment_cfg)
            lr = poly_lr(state.step, max_steps, config.lr, config.poly_power)
            for g in opt.param_groups:
                g["lr"] = lr
            loss, breakdown = total_loss(model, clip, generator=gen)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            rec = _step_record(state.step, lr, breakdown)
            records.append(rec)
            line = json.dumps(rec)
            log.debug(line)
            if log_fh:
                log_fh.write(line + "\n")
            state.step += 1
            state.lr = lr
            if val_clips and val_every and state.step % val_every == 0:
                report = evaluate(model, val_clips)
                model.train(True)
                log.info(json.dumps({"event": "validation", "step": state.step, "M_J": report.m_j}))
                if report.m_j > state.best_metric:
                    state.best_metric, state.best_step = report.m_j, state.step
                    if out_dir is not None:
                        best_path = save_checkpoint(out_dir / "best.pt", model, state, opt)
    finally:
        if log_fh:
            log_fh.close()
        model.train(False)
    ckpt = save_checkpoint(out_dir / "last.pt", model, state, opt) if out_dir is not None else None
    return TrainResult(model, records, state, ckpt, best_path)


def shuffled_audio(clips: Sequence[VideoClip], seed: int = 0) -> List[VideoClip]:
    """Reassign waveforms across clips with no clip keeping its own audio."""
    clips = list(clips)
    n = len(clips)
    if n < 2:
        return clips
    perm = np.random.default_rng(seed).permutation(n)
    out = list(clips)
    for i in range(n):
        dst, src = perm[i], perm[(i + 1) % n]
        out[dst] = clips[dst].with_(waveform=clips[src].waveform)
    return out


def evaluate(
    model: AudioVisualSegmenter,
    clips: Iterable[VideoClip],
    ablation: Optional[Ablation] = None,
    mode: str = "audio",
    seed: int = 0,
) -> EvalReport:
    model.train(False)
    preds, gts, ids, nulls = [], [], [], []
    for clip in clips:
        prompts = clip_prompts(clip, mode, seed)
        use_audio = "audio" in mode.split("+")
        res = combined_inference(model, clip, prompts, use_audio, ablation)
        preds.append(res.masks)
        gts.append(np.asarray(clip.masks) > 0)
        ids += [clip.clip_id] * clip.num_frames
        empty = ~gts[-1].reshape(clip.num_frames, -1).any(1)
        if empty.any():
            nulls.append(res.masks[empty])
    pred = np.concatenate(preds)
    gt = np.concatenate(gts)
    null = np.concatenate(nulls) if nulls else None
    return eval_metrics(pred, gt, ids, null)


def parse_eval_flags(flags: Optional[dict]):
    flags = dict(flags or {})
    unknown = sorted(set(flags) - set(EVAL_FLAGS))
    if unknown:
        raise ValueError(f"unknown eval flags: {unknown}")
    shuffle = bool(flags.pop("shuffle_audio", False))
    return Ablation(**flags), shuffle


def run_eval(checkpoint, clips, flags: Optional[dict] = None, out_path=None, expected: Optional[ModelConfig] = None):
    """Evaluate a checkpoint under ablation flags and optionally write the report."""
    model = checkpoint if isinstance(checkpoint, AudioVisualSegmenter) else load_checkpoint(checkpoint, expected)
    ablation, shuffle = parse_eval_flags(flags)
    clips = list(clips)
    if shuffle:
        clips = shuffled_audio(clips)
    report = evaluate(model, clips, ablation)
    if out_path is not None:
        Path(out_path).write_text(report.to_table())
    return report


def run_promptsim(checkpoint, clips, modes: Sequence[str] = MODES, seed: int = 0, warmup_frames: int = 10) -> Dict[str, dict]:
    model = checkpoint if isinstance(checkpoint, AudioVisualSegmenter) else load_checkpoint(checkpoint)
    clips = list(clips)
    out = {}
    for mode in modes:
        if mode not in MODES:
            raise ValueError(f"unknown prompt mode {mode!r}")
        model.reset_counters()
        report = evaluate(model, clips, mode=mode, seed=seed)
        counts = model.counters()
        tp = measure_throughput(model, clips, mode, warmup_frames, seed)
        out[mode] = {
            "M_J": report.row()["M_J"],
            "M_F": report.row()["M_F"],
            "frames": sum(c.num_frames for c in clips),
            "encoder_passes": counts["encoder_passes"],
            "decoder_passes": counts["decoder_passes"],
            "fps": tp.fps,
        }
    return out
