"""Jaccard / F-measure evaluation and the null-target score."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

BETA2 = 0.3
COLUMNS = ("M_J", "M_F", "J&F", "S")


def frame_jaccard(pred, gt):
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    axes = tuple(range(-2, 0))
    inter = (pred & gt).sum(axes)
    union = (pred | gt).sum(axes)
    return np.where(union > 0, inter / np.maximum(union, 1), 1.0)


def frame_fscore(pred, gt, beta2=BETA2):
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    axes = tuple(range(-2, 0))
    tp = (pred & gt).sum(axes).astype(np.float64)
    n_pred = pred.sum(axes)
    n_gt = gt.sum(axes)
    precision = np.where(n_pred > 0, tp / np.maximum(n_pred, 1), 0.0)
    recall = np.where(n_gt > 0, tp / np.maximum(n_gt, 1), 0.0)
    denom = beta2 * precision + recall
    f = np.where(denom > 0, (1 + beta2) * precision * recall / np.where(denom > 0, denom, 1), 0.0)
    both_empty = (n_pred == 0) & (n_gt == 0)
    return np.where(both_empty, 1.0, f)


def null_score(pred_masks) -> float:
    """Mean over frames of sqrt(foreground fraction); 0 is perfect."""
    pred = np.asarray(pred_masks, bool)
    if pred.ndim == 2:
        pred = pred[None]
    if pred.shape[0] == 0:
        return 0.0
    frac = pred.reshape(pred.shape[0], -1).mean(axis=1)
    return float(np.sqrt(frac).mean())


@dataclass
class EvalReport:
    m_j: float
    m_f: float
    jf: float
    s: Optional[float] = None
    per_clip: List[dict] = field(default_factory=list)

    def row(self) -> dict:
        """The table columns, as reported (x100 for J and F)."""
        return {
            "M_J": round(100 * self.m_j, 4),
            "M_F": round(100 * self.m_f, 4),
            "J&F": round(100 * self.jf, 4),
            "S": None if self.s is None else round(self.s, 6),
        }

    def to_table(self) -> str:
        row = self.row()
        head = " | ".join(f"{c:>8}" for c in COLUMNS)
        vals = " | ".join(f"{'-' if row[c] is None else format(row[c], '.2f' if c != 'S' else '.4f'):>8}" for c in COLUMNS)
        lines = [head, "-" * len(head), vals]
        if self.per_clip:
            lines += ["", f"{'clip':<20} {'frames':>6} {'J':>8} {'F':>8}"]
            for r in self.per_clip:
                lines.append(f"{r['clip_id']:<20} {r['frames']:>6} {100 * r['j']:>8.2f} {100 * r['f']:>8.2f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"columns": self.row(), "per_clip": self.per_clip}, sort_keys=True)


def eval_metrics(pred_masks, gt_masks, clip_ids=None, null_masks=None) -> EvalReport:
    """Frame-averaged Jaccard and F-measure over F x H x W binary masks.

    ``clip_ids`` (one per frame) adds a per-clip table; ``null_masks`` are the
    predictions on target-absent frames used for S.
    """
    pred = np.asarray(pred_masks, bool)
    gt = np.asarray(gt_masks, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    j = frame_jaccard(pred, gt)
    f = frame_fscore(pred, gt)
    m_j = float(j.mean()) if j.size else 0.0
    m_f = float(f.mean()) if f.size else 0.0
    per_clip = []
    if clip_ids is not None:
        ids = list(clip_ids)
        for cid in dict.fromkeys(ids):
            sel = np.array([i == cid for i in ids])
            per_clip.append({"clip_id": cid, "frames": int(sel.sum()), "j": float(j[sel].mean()), "f": float(f[sel].mean())})
    s = None if null_masks is None or len(null_masks) == 0 else null_score(null_masks)
    return EvalReport(m_j, m_f, (m_j + m_f) / 2, s, per_clip)
