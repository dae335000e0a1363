"""Frozen two-way mask decoder with per-block prompt injection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ModelConfig
from .encoders import LayerNorm2d
from .fuser import PromptBundle, sinusoid_1d, sinusoid_2d

# token order inside the decoder
MASK_SLICE = slice(0, 3)
OBJ_TOKEN = 3
IOU_TOKEN = 4
NUM_OUTPUT_TOKENS = 5

# init gains on the output layers of the hypernetworks and the IoU/object
# heads; with default init the frozen decoder's outputs span well under one
# logit and prompts cannot steer them
HYPER_GAIN = 30.0
HEAD_GAIN = 10.0

# visual prompt types
POINT_POSITIVE, BOX_CORNER_A, BOX_CORNER_B, PROMPT_PAD = 0, 1, 2, 3


@dataclass
class DecoderOutputs:
    mask_logits: torch.Tensor  # B x 3 x H x W
    iou_pred: torch.Tensor  # B x 3, in [0, 1]
    obj_logit: torch.Tensor  # B

    def detach(self) -> "DecoderOutputs":
        return DecoderOutputs(self.mask_logits.detach(), self.iou_pred.detach(), self.obj_logit.detach())


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x):
        N, T, C = x.shape
        return x.reshape(N, T, self.heads, C // self.heads).transpose(1, 2)

    def forward(self, q, k, v):
        N, T, C = q.shape
        q, k, v = self._split(self.q_proj(q)), self._split(self.k_proj(k)), self._split(self.v_proj(v))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(N, T, C)
        return self.out_proj(out)


class MLP(nn.Module):
    def __init__(self, dim_in, hidden, dim_out, layers):
        super().__init__()
        dims = [dim_in] + [hidden] * (layers - 1) + [dim_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class TwoWayBlock(nn.Module):
    """Token self-attention, token->image, MLP, image->token."""

    def __init__(self, dim, heads, mlp_dim, skip_first_layer_pe=False):
        super().__init__()
        self.self_attn = Attention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_t2i = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_dim, dim, 2)
        self.norm3 = nn.LayerNorm(dim)
        self.cross_i2t = Attention(dim, heads)
        self.norm4 = nn.LayerNorm(dim)
        self.skip_first_layer_pe = skip_first_layer_pe

    def forward(self, queries, keys, query_pe, key_pe):
        if self.skip_first_layer_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)
        q, k = queries + query_pe, keys + key_pe
        queries = self.norm2(queries + self.cross_t2i(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))
        q, k = queries + query_pe, keys + key_pe
        keys = self.norm4(keys + self.cross_i2t(k, q, queries))
        return queries, keys


class PromptEmbedder(nn.Module):
    """Embeds point / box-corner prompts: fixed sinusoidal coordinate code plus
    a learned offset per prompt type."""

    def __init__(self, dim, image_size):
        super().__init__()
        self.dim = dim
        self.image_size = image_size
        self.type_embed = nn.Embedding(4, dim)

    def coord_encoding(self, xy: torch.Tensor) -> torch.Tensor:
        # xy: ... x 2 pixel coordinates -> ... x dim
        u = (xy.to(torch.float64) + 0.5) / self.image_size
        half = self.dim // 2
        freq = 2.0 ** torch.arange(half // 2, dtype=torch.float64) * math.pi
        parts = []
        for axis in range(2):
            ang = u[..., axis : axis + 1] * freq
            parts += [torch.sin(ang), torch.cos(ang)]
        return torch.cat(parts, dim=-1)

    def forward(self, coords: torch.Tensor, types: torch.Tensor) -> torch.Tensor:
        """coords: B x M x 2 (x, y), types: B x M long -> B x M x dim."""
        enc = self.coord_encoding(coords).to(self.type_embed.weight.dtype)
        enc = torch.where((types == PROMPT_PAD)[..., None], torch.zeros_like(enc), enc)
        return enc + self.type_embed(types)


class MaskDecoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        L = config.L
        self.config = config
        self.output_tokens = nn.Embedding(NUM_OUTPUT_TOKENS, L)
        self.no_mask_embed = nn.Embedding(1, L)
        self.blocks = nn.ModuleList(
            [TwoWayBlock(L, config.decoder_heads, 4 * L, skip_first_layer_pe=(i == 0)) for i in range(3)]
        )
        self.final_attn = Attention(L, config.decoder_heads)
        self.norm_final = nn.LayerNorm(L)
        self.dc1 = nn.ConvTranspose2d(L, L // 2, kernel_size=2, stride=2)
        self.ln1 = LayerNorm2d(L // 2)
        self.dc2 = nn.ConvTranspose2d(L // 2, L // 4, kernel_size=2, stride=2)
        self.conv_s0 = nn.Conv2d(L, L // 4, kernel_size=1)
        self.conv_s1 = nn.Conv2d(L, L // 2, kernel_size=1)
        self.hyper = nn.ModuleList([MLP(L, L, L // 4, 3) for _ in range(config.num_mask_tokens)])
        self.iou_head = MLP(L, L, config.num_mask_tokens, 3)
        self.obj_head = MLP(L, L, 1, 3)
        with torch.no_grad():
            for mlp, gain in [(h, HYPER_GAIN) for h in self.hyper] + [(self.iou_head, HEAD_GAIN), (self.obj_head, HEAD_GAIN)]:
                mlp.layers[-1].weight.mul_(gain)
                mlp.layers[-1].bias.mul_(gain)
        self.prompt_embedder = PromptEmbedder(L, config.resolution)
        self.passes = 0

    def forward(
        self,
        image_embed: torch.Tensor,
        high_res: List[torch.Tensor],
        bundle: Optional[PromptBundle] = None,
        prompt_tokens: Optional[torch.Tensor] = None,
        trace: Optional[list] = None,
    ) -> DecoderOutputs:
        """image_embed: B x H' x W' x L (stride 16); high_res: stride-4 and
        stride-8 channel-last maps; prompt_tokens: optional B x M x L."""
        B, h, w, L = image_embed.shape
        tokens = self.output_tokens.weight[None].expand(B, -1, -1)
        if prompt_tokens is not None and prompt_tokens.shape[1]:
            tokens = torch.cat([tokens, prompt_tokens.to(tokens.dtype)], dim=1)
        keys = image_embed.reshape(B, h * w, L) + self.no_mask_embed.weight
        key_pe = sinusoid_2d(h, w, L, keys.dtype).reshape(1, h * w, L)
        query_pe = tokens
        queries = tokens

        if bundle is not None:
            for s, d in zip(bundle.sparse, bundle.dense):
                if d.shape[1:3] != (h, w) or s.shape != (B, L):
                    raise ValueError(f"prompt level shape {tuple(d.shape)} does not match {B}x{h}x{w}x{L}")

        for k, blk in enumerate(self.blocks, start=1):
            level = bundle.level(k) if bundle is not None else None
            if level is not None:
                r_a, r_v = level
                queries = torch.cat([queries[:, MASK_SLICE] + r_a[:, None, :], queries[:, 3:]], dim=1)
                keys = keys + r_v.reshape(B, h * w, L)
            if trace is not None:
                trace.append((queries, keys))
            queries, keys = blk(queries, keys, query_pe, key_pe)

        q, k = queries + query_pe, keys + key_pe
        queries = self.norm_final(queries + self.final_attn(q, k, keys))

        src = keys.transpose(1, 2).reshape(B, L, h, w)
        feat_s0 = self.conv_s0(high_res[0].permute(0, 3, 1, 2))
        feat_s1 = self.conv_s1(high_res[1].permute(0, 3, 1, 2))
        up = F.gelu(self.ln1(self.dc1(src) + feat_s1))
        up = F.gelu(self.dc2(up) + feat_s0)

        hyper_in = torch.stack([mlp(queries[:, i]) for i, mlp in enumerate(self.hyper)], dim=1)
        Bu, C, uh, uw = up.shape
        masks = (hyper_in @ up.reshape(B, C, uh * uw)).reshape(B, -1, uh, uw)
        H = W = self.config.resolution
        masks = F.interpolate(masks, size=(H, W), mode="bilinear", align_corners=False)

        iou_pred = torch.sigmoid(self.iou_head(queries[:, IOU_TOKEN]))
        obj_logit = self.obj_head(queries[:, OBJ_TOKEN]).squeeze(-1)
        self.passes += B
        return DecoderOutputs(masks, iou_pred, obj_logit)


def select_mask(outputs: DecoderOutputs, mode: str = "inference", gt: Optional[torch.Tensor] = None, losses=None):
    """Index of the chosen candidate per frame.

    training: argmin of focal + dice against ``gt``; inference: argmax of the
    predicted IoU. Ties go to the lowest index.
    """
    if mode == "training":
        if gt is None:
            raise ValueError("training-mode selection needs a ground-truth mask")
        if losses is None:
            from .losses import per_mask_seg_losses

            focal, dice = per_mask_seg_losses(outputs.mask_logits, gt)
            losses = focal + dice
        score = -losses.detach()
    elif mode == "inference":
        score = outputs.iou_pred.detach()
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    # argmax returns the first maximum
    best = score.max(dim=1, keepdim=True).values
    return (score == best).to(torch.int8).argmax(dim=1)
