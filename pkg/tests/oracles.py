"""Brute-force reference implementations used by the tests."""

import math

import torch
import torch.nn.functional as F

from avprompt.losses import EmbeddingBatch


def audiocon_bruteforce(batch: EmbeddingBatch, tau: float) -> float:
    e_v = batch.e_v.double().tolist()
    e_a = batch.e_a.double().tolist()
    yv = batch.v_labels.tolist()
    ya = batch.a_labels.tolist()
    M, B = len(e_v), len(e_a)
    if M == 0 or B == 0:
        return 0.0

    def dot(u, v):
        return sum(x * y for x, y in zip(u, v))

    total = 0.0
    for i in range(M):
        for b in range(B):
            if ya[b] != yv[i]:
                continue
            pos = math.exp(dot(e_v[i], e_a[b]) / tau)
            neg = 0.0
            for j in range(M):
                if yv[j] != yv[i]:
                    neg += math.exp(dot(e_v[i], e_v[j]) / tau)
            total += -math.log(pos / (pos + neg))
    return total / (M * B)


def supcon_bruteforce(batch: EmbeddingBatch, tau: float) -> float:
    feats = batch.e_v.double().tolist()
    labels = batch.v_labels.tolist()
    for e, y in zip(batch.e_a.double().tolist(), batch.a_labels.tolist()):
        if y >= 0:
            feats.append(e)
            labels.append(y)
    n = len(feats)

    def dot(u, v):
        return sum(x * y for x, y in zip(u, v))

    per_anchor = []
    for i in range(n):
        denom = sum(math.exp(dot(feats[i], feats[a]) / tau) for a in range(n) if a != i)
        positives = [p for p in range(n) if p != i and labels[p] == labels[i]]
        if not positives:
            continue
        s = 0.0
        for p in positives:
            s += -math.log(math.exp(dot(feats[i], feats[p]) / tau) / denom)
        per_anchor.append(s / len(positives))
    return sum(per_anchor) / len(per_anchor) if per_anchor else 0.0


def random_batch(gen: torch.Generator, B: int, M: int, C: int = 8, classes: int = 2) -> EmbeddingBatch:
    e_a = F.normalize(torch.randn(B, C, generator=gen, dtype=torch.float64), dim=-1)
    e_v = F.normalize(torch.randn(M, C, generator=gen, dtype=torch.float64), dim=-1)
    a_labels = torch.randint(-1, classes + 1, (B,), generator=gen)
    v_labels = torch.randint(0, classes + 1, (M,), generator=gen)
    v_frames = torch.randint(0, B, (M,), generator=gen)
    return EmbeddingBatch(e_a, a_labels, e_v, v_labels, v_frames)
