"""Class activation maps, pixel-correlation affinity and CAM refinement.

All functions accept either a single map ``(channels, H, W)`` or a batch
``(B, channels, H, W)`` and return the same layout. Correlation matrices are
``(HW, HW)`` or ``(B, HW, HW)`` over row-major flattened cells.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import DegenerateAffinityError, DimensionError

COSINE_EPS = 1e-8
CAM_NORM_EPS = 1e-5


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise DimensionError(f"expected a (C, H, W) or (B, C, H, W) tensor, got shape {tuple(x.shape)}")


def _project(features: torch.Tensor, weight: torch.Tensor, what: str) -> torch.Tensor:
    x, single = _batched(features)
    if weight.dim() != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(
            f"{what} weights {tuple(weight.shape)} do not match {x.shape[1]} feature channels"
        )
    out = torch.einsum("ol,blhw->bohw", weight, x)
    return out[0] if single else out


def compute_cam(features: torch.Tensor, projection: torch.Tensor, normalize: bool = False) -> torch.Tensor:
    """1x1 projection of backbone features onto the class channels (background, lesion)."""
    cam = _project(features, projection, "projection")
    return normalize_cam(cam) if normalize else cam


def normalize_cam(cam: torch.Tensor, eps: float = CAM_NORM_EPS) -> torch.Tensor:
    """ReLU, then divide each class channel by its spatial max plus ``eps``."""
    x, single = _batched(cam)
    x = F.relu(x)
    peak = x.flatten(2).amax(dim=2)[..., None, None]
    out = x / (peak + eps)
    return out[0] if single else out


def embed_features(features: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
    return _project(features, embedding, "embedding")


def pixel_correlation(embedded: torch.Tensor, eps: float = COSINE_EPS) -> torch.Tensor:
    """ReLU'd cosine similarity between every pair of spatial cells.

    The diagonal is pinned to 1 so zero vectors still have a positive row sum;
    off-diagonal similarity involving a zero vector is 0.
    """
    x, single = _batched(embedded)
    flat = x.flatten(2)  # B, E, HW
    norms = flat.norm(dim=1)  # B, HW
    dots = torch.einsum("bei,bej->bij", flat, flat)
    denom = torch.clamp(norms[:, :, None] * norms[:, None, :], min=eps)
    corr = F.relu(dots / denom)
    n = corr.shape[-1]
    eye = torch.eye(n, dtype=torch.bool, device=corr.device)
    corr = torch.where(eye, torch.ones((), dtype=corr.dtype, device=corr.device), corr)
    return corr[0] if single else corr


def correlation_row_sums(corr: torch.Tensor) -> torch.Tensor:
    return corr.sum(dim=-1)


def refine_cam(cam: torch.Tensor, corr: torch.Tensor) -> torch.Tensor:
    """Affinity-weighted average: ``refined[c, i] = sum_j corr[i, j] * cam[c, j] / sum_j corr[i, j]``."""
    x, single = _batched(cam)
    a = corr.unsqueeze(0) if corr.dim() == 2 else corr
    b, c, h, w = x.shape
    if a.shape[-2:] != (h * w, h * w) or a.shape[0] != b:
        raise DimensionError(
            f"correlation {tuple(corr.shape)} does not match CAM spatial size {h}x{w}"
        )
    row_sums = a.sum(dim=-1)
    if bool((row_sums <= 0).any()):
        raise DegenerateAffinityError("correlation matrix has a row summing to zero")
    weighted = torch.einsum("bij,bcj->bci", a, x.flatten(2))
    out = (weighted / row_sums[:, None, :]).reshape(b, c, h, w)
    return out[0] if single else out


def cam_to_logits(cam: torch.Tensor) -> torch.Tensor:
    """Adaptive average pool to 1x1: one score per class."""
    return cam.mean(dim=(-2, -1))
