"""Feature-space attention MIL: every spatial cell of the fused feature map is one instance."""
from __future__ import annotations

import torch

from .cam import _batched
from .equivariance import AffineSpec, invert_affine
from .errors import DimensionError


def build_instance_bag(
    f_orig: torch.Tensor, f_af: torch.Tensor, spec: AffineSpec, fuse: torch.Tensor
) -> torch.Tensor:
    """Align the affine-branch features to ``f_orig``'s grid, concatenate, and project to K channels.

    Returns ``(K, H, W)`` (or batched ``(B, K, H, W)``); the HW cells are the instances.
    """
    fo, single = _batched(f_orig)
    fa, _ = _batched(f_af)
    if fo.shape[:2] != fa.shape[:2]:
        raise DimensionError(f"branch features {tuple(fo.shape)} and {tuple(fa.shape)} disagree")
    aligned = invert_affine(fa, spec, tuple(fo.shape[-2:]))
    stacked = torch.cat([fo, aligned], dim=1)
    if fuse.dim() != 2 or fuse.shape[1] != stacked.shape[1]:
        raise DimensionError(f"fuse weights {tuple(fuse.shape)} do not match {stacked.shape[1]} stacked channels")
    bag = torch.einsum("kc,bchw->bkhw", fuse, stacked)
    return bag[0] if single else bag


def attention_weights(bag: torch.Tensor, w1: torch.Tensor, w2: torch.Tensor) -> torch.Tensor:
    """sigmoid(w1ᵀ ReLU(w2 f)) per instance column; returns ``(HW,)`` or ``(B, HW)``."""
    x, single = _batched(bag)
    if w2.dim() != 2 or w2.shape[1] != x.shape[1] or w1.shape != (w2.shape[0],):
        raise DimensionError(
            f"attention weights w1 {tuple(w1.shape)}, w2 {tuple(w2.shape)} incompatible with K={x.shape[1]}"
        )
    hidden = torch.relu(torch.einsum("dk,bkn->bdn", w2, x.flatten(2)))
    a = torch.sigmoid(torch.einsum("d,bdn->bn", w1, hidden))
    return a[0] if single else a


def apply_attention(bag: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    x, single = _batched(bag)
    aa = a.unsqueeze(0) if a.dim() == 1 else a
    b, k, h, w = x.shape
    if aa.shape != (b, h * w):
        raise DimensionError(f"{tuple(a.shape)} attention weights for {h * w} instances")
    out = x * aa.reshape(b, 1, h, w)
    return out[0] if single else out


def mil_logits(gated: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Mean-pool instances to a K-vector, then the fully-connected layer."""
    pooled = gated.mean(dim=(-2, -1))
    return pooled @ weight.T + bias


def mil_classify(gated: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    return torch.softmax(mil_logits(gated, weight, bias), dim=-1)
