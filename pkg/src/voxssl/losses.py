"""Contrastive, classification, and metric-learning losses.

All functions accept numpy arrays or torch tensors (single samples or
batches), compute in the input's floating dtype, and return a scalar torch
tensor so gradients can flow during training. Log-sum-exp reductions use
max-subtraction for stability.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DimensionMismatch, EmptyNegatives, LabelOutOfRange


@dataclass(frozen=True)
class TripletConfig:
    """L2 triplet loss settings; margin is the enforced positive/negative gap."""

    margin: float = 1.0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be > 0")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def _contrastive_scores(pred, positive, negatives, temperature: float):
    pred = _as_tensor(pred)
    positive = _as_tensor(positive)
    negatives = _as_tensor(negatives)
    if pred.ndim == 1:
        pred = pred[None]
        positive = positive[None]
        negatives = negatives[None]
    if negatives.ndim != 3 or negatives.shape[1] == 0:
        raise EmptyNegatives("need at least one negative embedding")
    if pred.shape != positive.shape or pred.shape[-1] != negatives.shape[-1]:
        raise DimensionMismatch(
            f"embedding dims disagree: pred {tuple(pred.shape)}, "
            f"positive {tuple(positive.shape)}, negatives {tuple(negatives.shape)}"
        )
    s_pos = (pred * positive).sum(dim=-1, keepdim=True)
    s_neg = torch.einsum("bd,bnd->bn", pred, negatives)
    return torch.cat([s_pos, s_neg], dim=1) / temperature


def info_nce(pred, positive, negatives, temperature: float = 1.0) -> torch.Tensor:
    """Categorical contrastive loss: softmax cross-entropy of the positive
    against the whole candidate set, scores being dot products."""
    scores = _contrastive_scores(pred, positive, negatives, temperature)
    loss = torch.logsumexp(scores, dim=1) - scores[:, 0]
    return loss.mean()


def binary_nce(pred, positive, negatives, temperature: float = 1.0) -> torch.Tensor:
    """Binary pairwise variant: mean logistic loss over the positive pair and
    each negative pair, normalized by the N+1 pairs."""
    scores = _contrastive_scores(pred, positive, negatives, temperature)
    per_pair = torch.cat(
        [F.softplus(-scores[:, :1]), F.softplus(scores[:, 1:])], dim=1
    )
    return per_pair.mean(dim=1).mean()


def cross_entropy(logits, label) -> torch.Tensor:
    """-log softmax(logits)[label]; batched inputs average over the batch."""
    logits = _as_tensor(logits)
    label_t = _as_tensor(label).long()
    if logits.ndim == 1:
        logits = logits[None]
        label_t = label_t.reshape(1)
    k = logits.shape[-1]
    if ((label_t < 0) | (label_t >= k)).any():
        raise LabelOutOfRange(f"labels {label_t.tolist()} outside 0..{k - 1}")
    picked = logits.gather(1, label_t[:, None])[:, 0]
    return (torch.logsumexp(logits, dim=1) - picked).mean()


def triplet(anchor, positive, negative, cfg: TripletConfig = TripletConfig()) -> torch.Tensor:
    """Hinge on L2 distances: mean of max(0, d(a,p) - d(a,n) + margin)."""
    a, p, n = _as_tensor(anchor), _as_tensor(positive), _as_tensor(negative)
    if not (a.shape == p.shape == n.shape):
        raise DimensionMismatch(
            f"triplet shapes disagree: {tuple(a.shape)}, {tuple(p.shape)}, {tuple(n.shape)}"
        )
    if a.ndim == 1:
        a, p, n = a[None], p[None], n[None]
    d_ap = torch.linalg.vector_norm(a - p, dim=-1)
    d_an = torch.linalg.vector_norm(a - n, dim=-1)
    return torch.clamp(d_ap - d_an + cfg.margin, min=0.0).mean()
