"""Cross-modal fuser that turns a visual pyramid plus audio/text conditioning
into sparse (per-frame) and dense (per-pixel) prompts for the mask decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ModelConfig
from .encoders import ConditioningSequence, PyramidFeatures


@dataclass
class PromptBundle:
    sparse: List[torch.Tensor]  # each B x L
    dense: List[torch.Tensor]  # each B x H' x W' x L
    levels: Tuple[int, ...] = (1, 2, 3)  # 1-based pyramid level of each entry

    def __post_init__(self):
        if not (len(self.sparse) == len(self.dense) == len(self.levels)):
            raise ValueError("sparse, dense and levels must have equal length")
        if len(self.levels) > 3:
            raise ValueError("at most 3 prompt levels")
        if self.dense and any(d.shape[1:3] != self.dense[0].shape[1:3] for d in self.dense):
            raise ValueError("dense prompts must share H' x W'")

    def level(self, k: int):
        """(sparse, dense) for 1-based level k, or None when not populated."""
        if k in self.levels:
            i = self.levels.index(k)
            return self.sparse[i], self.dense[i]
        return None

    def zeros_like(self) -> "PromptBundle":
        return PromptBundle(
            [torch.zeros_like(s) for s in self.sparse], [torch.zeros_like(d) for d in self.dense], self.levels
        )

    def without_sparse(self) -> "PromptBundle":
        return PromptBundle([torch.zeros_like(s) for s in self.sparse], list(self.dense), self.levels)

    def without_dense(self) -> "PromptBundle":
        return PromptBundle(list(self.sparse), [torch.zeros_like(d) for d in self.dense], self.levels)


def sinusoid_1d(n: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(n, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)
    return pe.to(dtype)


def sinusoid_2d(h: int, w: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """h x w x dim; first half of the channels encodes rows, second half columns."""
    half = dim // 2
    ys = sinusoid_1d(h, half, torch.float64)
    xs = sinusoid_1d(w, half, torch.float64)
    pe = torch.cat([ys[:, None, :].expand(h, w, half), xs[None, :, :].expand(h, w, half)], dim=-1)
    return pe.to(dtype)


def scaled_dot_attention(q, k, v, dropout: Optional[nn.Module] = None):
    """softmax(q k^T / sqrt(d)) v over the last two dims."""
    attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)
    if dropout is not None:
        attn = dropout(attn)
    return attn @ v


class Mlp(nn.Module):
    def __init__(self, dim, hidden, out=None, drop=0.0):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out or dim)
        self.drop = nn.Dropout(drop)

    def forward(self, x):
        return self.drop(self.fc2(self.drop(F.gelu(self.fc1(x)))))


class SelfAttention(nn.Module):
    """Multi-head self-attention; with ``sr_ratio > 1`` keys/values come from a
    strided conv over the token grid (spatial-reduction attention)."""

    def __init__(self, dim, heads, dropout=0.0, sr_ratio=1):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.attn_drop = nn.Dropout(dropout)
        self.proj_drop = nn.Dropout(dropout)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, kernel_size=sr_ratio, stride=sr_ratio)
            self.sr_norm = nn.LayerNorm(dim)

    def _split(self, x):
        N, T, C = x.shape
        return x.reshape(N, T, self.heads, C // self.heads).transpose(1, 2)

    def forward(self, x, hw=None):
        N, T, C = x.shape
        q = self._split(self.q(x))
        src = x
        if self.sr_ratio > 1:
            h, w = hw
            grid = x.transpose(1, 2).reshape(N, C, h, w)
            src = self.sr_norm(self.sr(grid).flatten(2).transpose(1, 2))
        k, v = self.kv(src).chunk(2, dim=-1)
        out = scaled_dot_attention(q, self._split(k), self._split(v), self.attn_drop)
        out = out.transpose(1, 2).reshape(N, T, C)
        return self.proj_drop(self.proj(out))


class Block(nn.Module):
    def __init__(self, dim, heads, dropout=0.0, sr_ratio=1, mlp_ratio=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, dropout, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio, drop=dropout)

    def forward(self, x, hw=None):
        x = x + self.attn(self.norm1(x), hw)
        return x + self.mlp(self.norm2(x))


class CrossFusion(nn.Module):
    """Two-way cross attention between visual tokens and conditioning tokens.

    Both directions project to a compressed width, attend with a single head,
    normalise, and map back to the model width through an MLP. The result is
    added residually to the (position-free) inputs.
    """

    def __init__(self, dim, fused_dim):
        super().__init__()
        self.v_qkv = nn.Linear(dim, 3 * fused_dim)
        self.c_qkv = nn.Linear(dim, 3 * fused_dim)
        self.v_norm = nn.LayerNorm(fused_dim)
        self.c_norm = nn.LayerNorm(fused_dim)
        self.v_out = Mlp(fused_dim, dim, dim)
        self.c_out = Mlp(fused_dim, dim, dim)

    def forward(self, r_c, r_v, pos_c, pos_v):
        # r_c: T_c x L, r_v: B x H' x W' x L
        if r_c.shape[-1] != r_v.shape[-1]:
            raise ValueError("conditioning and visual widths differ")
        B, h, w, L = r_v.shape
        xv = (r_v + pos_v).reshape(B * h * w, L)
        xc = r_c + pos_c
        qv, kv, vv = self.v_qkv(xv).chunk(3, dim=-1)
        qc, kc, vc = self.c_qkv(xc).chunk(3, dim=-1)
        fused_v = scaled_dot_attention(qv, kc, vc)
        fused_c = scaled_dot_attention(qc, kv, vv)
        out_v = r_v + self.v_out(self.v_norm(fused_v)).reshape(B, h, w, L)
        out_c = r_c + self.c_out(self.c_norm(fused_c))
        return out_c, out_v


class FuserLevel(nn.Module):
    def __init__(self, config: ModelConfig, k: int):
        super().__init__()
        L, p = config.L, config.patch_sizes[k - 1]
        self.k = k
        self.patch_size = p
        self.patch_embed = nn.Conv2d(L, L, kernel_size=p, stride=p)
        self.cond_blocks = nn.ModuleList(
            [Block(L, config.attn_heads, config.attn_dropout) for _ in range(config.cond_attn_blocks)]
        )
        self.visual_blocks = nn.ModuleList(
            [
                Block(L, config.attn_heads, config.attn_dropout, sr_ratio=config.sr_ratio)
                for _ in range(config.visual_attn_blocks)
            ]
        )
        self.fusion = CrossFusion(L, config.fusion_dim)
        self.smooth = nn.Conv2d(L, L, kernel_size=1) if k >= 2 else None


class AuralFuser(nn.Module):
    """Per-level patch embedding, self-attention, two-way fusion and pyramid smoothing."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.levels = nn.ModuleList([FuserLevel(config, k) for k in (1, 2, 3)])
        self.level_passes = 0

    def patch_embed_level(self, z_v: torch.Tensor, k: int) -> torch.Tensor:
        lvl = self.levels[k - 1]
        B, h, w, L = z_v.shape
        if h % lvl.patch_size or w % lvl.patch_size:
            raise ValueError(f"level {k}: {h}x{w} not divisible by patch size {lvl.patch_size}")
        out = lvl.patch_embed(z_v.permute(0, 3, 1, 2))
        return out.permute(0, 2, 3, 1)

    def pyramid_smooth(self, prev_r_v: Optional[torch.Tensor], z_v: torch.Tensor, k: int) -> torch.Tensor:
        if k < 2:
            raise ValueError("pyramid smoothing applies to levels 2 and 3 only")
        x = z_v if prev_r_v is None else prev_r_v + z_v
        out = self.levels[k - 1].smooth(x.permute(0, 3, 1, 2))
        return out.permute(0, 2, 3, 1)

    def attend_and_fuse_level(self, z_c: torch.Tensor, z_v: torch.Tensor, k: int):
        lvl = self.levels[k - 1]
        B, h, w, L = z_v.shape
        if z_c.shape[-1] != L:
            raise ValueError(f"conditioning width {z_c.shape[-1]} != visual width {L}")
        pos_c = sinusoid_1d(z_c.shape[0], L, z_c.dtype)
        pos_v = sinusoid_2d(h, w, L, z_v.dtype)

        r_c = (z_c + pos_c)[None]
        for blk in lvl.cond_blocks:
            r_c = blk(r_c)
        r_c = r_c[0]

        r_v = (z_v + pos_v).reshape(B, h * w, L)
        for blk in lvl.visual_blocks:
            r_v = blk(r_v, (h, w))
        r_v = r_v.reshape(B, h, w, L)

        return lvl.fusion(r_c, r_v, pos_c, pos_v)

    def forward(self, pyramid: PyramidFeatures, cond: ConditioningSequence, pyramid_levels=None) -> PromptBundle:
        n = pyramid_levels or self.config.pyramid_levels
        if not 1 <= n <= 3:
            raise ValueError("pyramid_levels must be in {1, 2, 3}")
        B = cond.num_frames
        sparse, dense, ks = [], [], []
        prev = None
        for k in range(4 - n, 4):
            z_v = self.patch_embed_level(pyramid.levels[k - 1], k)
            if k >= 2:
                z_v = self.pyramid_smooth(prev, z_v, k)
            r_c, r_v = self.attend_and_fuse_level(cond.z_c, z_v, k)
            self.level_passes += 1
            sparse.append(r_c[:B])
            dense.append(r_v)
            ks.append(k)
            prev = r_v
        return PromptBundle(sparse, dense, tuple(ks))
