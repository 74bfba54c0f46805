"""BCE + Dice deep-supervision loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from .errors import ArityError, ShapeError

EPS = 1e-7


def _check(pred, label):
    if pred.shape != label.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and label {tuple(label.shape)} differ")


def bce(pred: torch.Tensor, label: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Pixel-mean binary cross entropy on probabilities clamped to [eps, 1 - eps]."""
    _check(pred, label)
    p = pred.clamp(eps, 1.0 - eps)
    return -(label * torch.log(p) + (1.0 - label) * torch.log(1.0 - p)).mean()


def dice(pred: torch.Tensor, label: torch.Tensor, sigma: float = 1.0) -> torch.Tensor:
    """``1 - (2*sum(label*pred) + sigma) / (sum(label) + sum(pred) + sigma)`` over the whole map."""
    _check(pred, label)
    inter = (label * pred).sum()
    return 1.0 - (2.0 * inter + sigma) / (label.sum() + pred.sum() + sigma)


@dataclass
class LossReport:
    total: torch.Tensor
    per_head: list        # detached floats, one per supervised head
    components: list      # (bce, dice) float pairs per head

    def log_line(self, step: int) -> str:
        parts = [f"step={step}", f"total={float(self.total.detach()):.6f}"]
        for m, (b, d) in enumerate(self.components, 1):
            parts.append(f"h{m}_bce={b:.6f}")
            parts.append(f"h{m}_dice={d:.6f}")
        return " ".join(parts)


def total_loss(head_probs: Sequence[torch.Tensor], ccr_prob: Optional[torch.Tensor], label: torch.Tensor,
               lam: float = 0.5, sigma: float = 1.0, n_heads: int = 3) -> LossReport:
    """Average of ``bce + lam * dice`` over the decoder heads and, if given, the CCR head."""
    if len(head_probs) != n_heads:
        raise ArityError(f"expected {n_heads} decoder heads, got {len(head_probs)}")
    maps = list(head_probs) + ([ccr_prob] if ccr_prob is not None else [])
    terms, per_head, comps = [], [], []
    for p in maps:
        b, d = bce(p, label), dice(p, label, sigma)
        t = b + lam * d
        terms.append(t)
        per_head.append(float(t.detach()))
        comps.append((float(b.detach()), float(d.detach())))
    total = torch.stack(terms).sum() / len(terms)
    return LossReport(total, per_head, comps)
