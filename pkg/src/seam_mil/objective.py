"""Label encoding and the four loss terms of the joint objective."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F

PROB_EPS = 1e-12


class MultiLabel(NamedTuple):
    background: int
    lesion: int


def encode_labels(is_rdr: bool) -> MultiLabel:
    """Background is always present; the lesion bit carries the rDR label."""
    return MultiLabel(1, int(bool(is_rdr)))


def decode_labels(label: MultiLabel) -> bool:
    return bool(label.lesion)


def multilabel_tensor(is_rdr: torch.Tensor) -> torch.Tensor:
    """Batch form of :func:`encode_labels`: ``(B,)`` bits -> ``(B, 2)`` [background, lesion]."""
    is_rdr = is_rdr.to(torch.get_default_dtype()).reshape(-1)
    return torch.stack([torch.ones_like(is_rdr), is_rdr], dim=1)


def cross_entropy(probs: torch.Tensor, label) -> torch.Tensor:
    """-log p[label] with probabilities clamped to [eps, 1 - eps]; batched input is averaged."""
    p = probs.clamp(PROB_EPS, 1 - PROB_EPS)
    if p.dim() == 1:
        return -torch.log(p[int(label)])
    idx = torch.as_tensor(label, dtype=torch.long).reshape(-1, 1)
    return -torch.log(p.gather(1, idx)).mean()


def multilabel_soft_margin(logits: torch.Tensor, labels, include_background: bool = False) -> torch.Tensor:
    """Per-class logistic loss over [background, lesion] logits.

    Only the lesion class is supervised unless ``include_background``. The
    mean runs over the selected classes (and over the batch for 2-D input).
    """
    y = logits if logits.dim() == 2 else logits.unsqueeze(0)
    t = torch.as_tensor(labels, dtype=y.dtype).reshape(y.shape)
    if not include_background:
        y, t = y[:, 1:], t[:, 1:]
    per_class = -(t * F.logsigmoid(y) + (1 - t) * F.logsigmoid(-y))
    return per_class.mean()


@dataclass
class LossBreakdown:
    multi_class: float
    er: float
    ecr: float
    cross_entropy: float
    total: float = 0.0

    def parts(self) -> tuple[float, float, float, float]:
        return (self.multi_class, self.er, self.ecr, self.cross_entropy)

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_WEIGHTS = (1.0, 1.0, 1.0, 1.0)


def total_loss(parts: Sequence, weights: Sequence[float] = DEFAULT_WEIGHTS):
    """Weighted sum of (multi_class, er, ecr, cross_entropy); works on floats or tensors."""
    if isinstance(parts, LossBreakdown):
        parts = parts.parts()
    if len(parts) != 4 or len(weights) != 4:
        raise ValueError("expected four loss parts and four weights")
    return sum(w * p for w, p in zip(weights, parts))
