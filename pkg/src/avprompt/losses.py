"""Segmentation losses, embedding projection/sampling and contrastive objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ModelConfig
from .decoder import DecoderOutputs, select_mask
from .fuser import PromptBundle

ALPHA = 0.25
GAMMA = 2.0


def sigmoid_focal_loss(logits, targets, alpha=ALPHA, gamma=GAMMA):
    """Mean focal loss over the trailing (pixel) dims."""
    prob = torch.sigmoid(logits)
    return focal_from_probs(prob, targets, alpha, gamma, ce=F.binary_cross_entropy_with_logits(logits, targets, reduction="none"))


def focal_from_probs(prob, targets, alpha=ALPHA, gamma=GAMMA, ce=None):
    if ce is None:
        ce = F.binary_cross_entropy(prob, targets, reduction="none")
    p_t = prob * targets + (1 - prob) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma
    if alpha >= 0:
        loss = (alpha * targets + (1 - alpha) * (1 - targets)) * loss
    return loss.flatten(-2).mean(-1)


def dice_loss(prob, targets, smooth=1.0):
    """1 - (2|P.G| + s) / (|P| + |G| + s) over the trailing two dims."""
    p, t = prob.flatten(-2), targets.flatten(-2)
    num = 2 * (p * t).sum(-1)
    den = p.sum(-1) + t.sum(-1)
    return 1 - (num + smooth) / (den + smooth)


def mask_iou(pred_bin, gt_bin):
    """Hard IoU over the trailing two dims; empty vs empty counts as 1."""
    inter = (pred_bin & gt_bin).flatten(-2).sum(-1).to(torch.float64)
    union = (pred_bin | gt_bin).flatten(-2).sum(-1).to(torch.float64)
    return torch.where(union > 0, inter / union.clamp(min=1), torch.ones_like(union))


def per_mask_seg_losses(mask_logits, gt, alpha=ALPHA, gamma=GAMMA, smooth=1.0):
    """Focal and dice per candidate: both B x K."""
    target = (gt > 0).to(mask_logits.dtype)[:, None].expand_as(mask_logits)
    focal = sigmoid_focal_loss(mask_logits, target, alpha, gamma)
    dice = dice_loss(torch.sigmoid(mask_logits), target, smooth)
    return focal, dice


def sam2_loss(outputs: DecoderOutputs, gt, config: Optional[ModelConfig] = None, obj_label=None):
    """Weighted focal + dice + IoU-L1 + objectness BCE on the best candidate.

    Returns (total, breakdown dict, selected index per frame). ``gt`` is B x H x W.
    """
    cfg = config or ModelConfig()
    w_focal, w_dice, w_iou, w_occ = cfg.loss_weights
    logits = outputs.mask_logits
    if gt.shape != (logits.shape[0],) + tuple(logits.shape[-2:]):
        raise ValueError(f"gt shape {tuple(gt.shape)} does not match predictions {tuple(logits.shape)}")
    focal, dice = per_mask_seg_losses(logits, gt, cfg.focal_alpha, cfg.focal_gamma, cfg.dice_smooth)
    idx = select_mask(outputs, "training", gt, losses=focal + dice)
    rows = torch.arange(logits.shape[0])
    focal_sel, dice_sel = focal[rows, idx], dice[rows, idx]

    gt_bin = gt > 0
    with torch.no_grad():
        actual_iou = mask_iou(logits > 0, gt_bin[:, None]).to(logits.dtype)  # B x K
    iou_all = (outputs.iou_pred - actual_iou).abs()
    iou_l = iou_all.mean(1) if cfg.supervise_all_iou else iou_all[rows, idx]

    if obj_label is None:
        obj_label = gt_bin.flatten(1).any(1)
    occ = F.binary_cross_entropy_with_logits(outputs.obj_logit, obj_label.to(logits.dtype), reduction="none")

    parts = {
        "focal": focal_sel.mean(),
        "dice": dice_sel.mean(),
        "iou": iou_l.mean(),
        "occ": occ.mean(),
    }
    total = w_focal * parts["focal"] + w_dice * parts["dice"] + w_iou * parts["iou"] + w_occ * parts["occ"]
    return total, parts, idx


class ProjectionHeads(nn.Module):
    """Two 3-layer MLPs mapping audio and visual prompts to the contrastive space."""

    def __init__(self, dim, out_dim=64):
        super().__init__()

        def head():
            return nn.Sequential(
                nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, out_dim)
            )

        self.audio = head()
        self.visual = head()


@dataclass
class EmbeddingBatch:
    e_a: torch.Tensor  # B x C, unit norm
    a_labels: torch.Tensor  # B, -1 when the frame has no labelled target
    e_v: torch.Tensor  # M x C, unit norm
    v_labels: torch.Tensor  # M pixel labels
    v_frames: torch.Tensor  # M frame indices
    v_levels: Optional[torch.Tensor] = None


def frame_labels(gt):
    """Audio label per frame: its dominant non-zero class, or -1 for empty frames."""
    labels = []
    for m in gt:
        fg = m[m > 0]
        labels.append(int(torch.mode(fg).values) if fg.numel() else -1)
    return torch.tensor(labels, dtype=torch.long)


def downsample_labels(gt, size):
    """Nearest-neighbour downsampling of B x H x W integer labels."""
    return F.interpolate(gt[:, None].to(torch.float64), size=size, mode="nearest")[:, 0].round().long()


def balanced_sample(hard_idx, easy_idx, n, generator):
    """Up to n positions split 1:1 between hard and easy pools; a short pool is
    topped up from the other. No replacement."""
    hard = hard_idx[torch.randperm(len(hard_idx), generator=generator)]
    easy = easy_idx[torch.randperm(len(easy_idx), generator=generator)]
    n_hard = min(len(hard), n // 2)
    n_easy = min(len(easy), n - n_hard)
    n_hard = min(len(hard), n - n_easy)
    return torch.cat([hard[:n_hard], easy[:n_easy]])


def project_and_sample(
    bundle: PromptBundle,
    gt,
    pred_mask,
    projectors: ProjectionHeads,
    config: ModelConfig,
    generator: Optional[torch.Generator] = None,
) -> EmbeddingBatch:
    """Project prompts and draw a hard/easy balanced set of visual embeddings.

    ``pred_mask`` is the current B x H x W binary prediction used for mining.
    The audio embedding of a frame is the mean of its per-level projections.
    """
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    B = gt.shape[0]
    hw = bundle.dense[0].shape[1:3]
    pix_labels = downsample_labels(gt, hw)  # B x h x w
    pred_small = downsample_labels(pred_mask.long(), hw) > 0
    correct = pred_small == (pix_labels > 0)
    a_labels = frame_labels(gt)
    frames = range(1) if config.contrastive_first_frame_only else range(B)

    e_a = torch.stack([projectors.audio(s) for s in bundle.sparse]).mean(0)
    e_a = F.normalize(e_a, dim=-1)

    feats, labels, fidx, lidx = [], [], [], []
    for level, dense in zip(bundle.levels, bundle.dense):
        for b in frames:
            flat_correct = correct[b].flatten()
            hard = torch.nonzero(~flat_correct).flatten()
            easy = torch.nonzero(flat_correct).flatten()
            pick = balanced_sample(hard, easy, config.contrastive_samples_per_scale, generator)
            feats.append(dense[b].reshape(-1, dense.shape[-1])[pick])
            labels.append(pix_labels[b].flatten()[pick])
            fidx.append(torch.full((len(pick),), b, dtype=torch.long))
            lidx.append(torch.full((len(pick),), level, dtype=torch.long))
    e_v = F.normalize(projectors.visual(torch.cat(feats)), dim=-1)

    if config.contrastive_first_frame_only:
        a_labels = a_labels.clone()
        a_labels[1:] = -1
    return EmbeddingBatch(e_a, a_labels, e_v, torch.cat(labels), torch.cat(fidx), torch.cat(lidx))


def audiocon_loss(batch: EmbeddingBatch, tau: float = 0.10):
    """Audio-anchored InfoNCE.

    Each visual embedding is an anchor; every audio embedding whose frame label
    equals the anchor's pixel label is a positive, and visual embeddings with a
    different pixel label are the negatives. Normalised by |E_v| * B.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    e_v, e_a = batch.e_v, batch.e_a
    M, B = e_v.shape[0], e_a.shape[0]
    if M == 0 or B == 0:
        return e_v.sum() * 0.0
    s_pos = e_v @ e_a.T / tau  # M x B
    s_vv = e_v @ e_v.T / tau  # M x M
    match = batch.v_labels[:, None] == batch.a_labels[None, :]
    neg = batch.v_labels[:, None] != batch.v_labels[None, :]
    neg_lse = torch.logsumexp(s_vv.masked_fill(~neg, float("-inf")), dim=1)  # -inf when no negatives
    terms = torch.logaddexp(s_pos, neg_lse[:, None]) - s_pos
    return (terms * match).sum() / (M * B)


def supcon_loss(batch: EmbeddingBatch, tau: float = 0.10):
    """Supervised contrastive loss over the union of visual and audio embeddings.

    Audio embeddings of unlabelled frames (label -1) are left out.
    """
    keep = batch.a_labels >= 0
    feats = torch.cat([batch.e_v, batch.e_a[keep]])
    labels = torch.cat([batch.v_labels, batch.a_labels[keep]])
    n = feats.shape[0]
    if n < 2:
        return feats.sum() * 0.0
    sim = feats @ feats.T / tau
    eye = torch.eye(n, dtype=torch.bool)
    log_prob = sim - torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1, keepdim=True)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    n_pos = pos.sum(1)
    has = n_pos > 0
    if not has.any():
        return feats.sum() * 0.0
    per_anchor = -(log_prob * pos).sum(1)[has] / n_pos[has]
    return per_anchor.mean()


def contrastive_loss(batch: EmbeddingBatch, config: ModelConfig):
    if config.contrastive == "audiocon":
        return audiocon_loss(batch, config.tau)
    if config.contrastive == "supcon":
        return supcon_loss(batch, config.tau)
    return batch.e_v.sum() * 0.0


def total_loss(model, clip, generator=None, ablation=None, contrastive=True):
    """Forward ``clip`` through ``model`` and return (loss, breakdown dict).

    The contrastive term carries unit weight; ``contrastive=False`` (or
    ``config.contrastive == "none"``) leaves the segmentation loss alone.
    """
    from .model import clip_tensors

    cfg = model.config
    frames, wave, gt = clip_tensors(clip, model.dtype)
    out = model(frames, wave, clip.text_tokens, ablation=ablation)
    seg, parts, idx = sam2_loss(out.outputs, gt, cfg)
    breakdown: Dict[str, torch.Tensor] = dict(parts)
    loss = seg
    if contrastive and cfg.contrastive != "none":
        rows = torch.arange(gt.shape[0])
        pred = out.outputs.mask_logits[rows, idx].detach() > 0
        batch = project_and_sample(out.bundle, gt, pred, model.projectors, cfg, generator)
        ctrs = contrastive_loss(batch, cfg)
        loss = loss + ctrs
    else:
        ctrs = seg.new_zeros(())
    breakdown["ctrs"] = ctrs
    breakdown["total"] = loss
    return loss, breakdown
