"""Central finite-difference checks of every loss and differentiable CAM/MIL op (float64)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from . import cam as cam_ops
from . import mil as mil_ops
from .equivariance import AffineSpec, apply_affine, ecr_loss, er_loss
from .objective import cross_entropy, multilabel_soft_margin

STEP = 1e-3
TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def numeric_grad(fn: Callable[[], torch.Tensor], x: torch.Tensor, step: float = STEP) -> torch.Tensor:
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = fn().item()
            flat[i] = orig - step
            lo = fn().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitude."""
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-12)
    return (analytic - numeric).abs().max().item() / scale


def check(name: str, fn: Callable[[], torch.Tensor], inputs: Sequence[torch.Tensor], step: float = STEP) -> GradCheckResult:
    for x in inputs:
        x.requires_grad_(True)
    analytic = torch.autograd.grad(fn(), inputs)
    worst = 0.0
    for x, a in zip(inputs, analytic):
        x.requires_grad_(False)
        worst = max(worst, relative_error(a, numeric_grad(fn, x, step)))
    return GradCheckResult(name, worst)


def _away_from_zero(x: torch.Tensor, margin: float) -> torch.Tensor:
    sign = torch.where(x >= 0, 1.0, -1.0).to(x.dtype)
    return torch.where(x.abs() < margin, sign * (margin + x.abs()), x)


def _offset_target(source: torch.Tensor, spec: AffineSpec, g: torch.Generator) -> torch.Tensor:
    """A map whose residual against AF(source) stays at least 0.05 from the L1 kink."""
    base = apply_affine(source, spec)
    noise = torch.rand(base.shape, generator=g, dtype=base.dtype) * 0.4 + 0.05
    sign = torch.where(torch.rand(base.shape, generator=g) < 0.5, -1.0, 1.0).to(base.dtype)
    return base + sign * noise


def run_suite(seed: int = 0) -> list[GradCheckResult]:
    g = torch.Generator().manual_seed(seed)
    dt = torch.float64

    def rnd(*shape):
        return torch.rand(*shape, generator=g, dtype=dt)

    results = []

    # equivariant losses, flip and rescale transforms
    for spec in (AffineSpec("hflip"), AffineSpec.rescale(0.5)):
        a = rnd(2, 2, 4, 4)
        b = _offset_target(a, spec, g)
        results.append(check(f"er_loss[{spec}]", lambda: er_loss(a, b, spec), [a, b]))
        c_o, r_o = rnd(2, 2, 4, 4), rnd(2, 2, 4, 4)
        r_a = _offset_target(c_o, spec, g)
        c_a = _offset_target(r_o, spec, g)
        results.append(
            check(f"ecr_loss[{spec}]", lambda: ecr_loss(c_o, r_o, c_a, r_a, spec), [c_o, r_o, c_a, r_a])
        )

    # refinement through the cosine affinity, w.r.t. CAM and embedding weights
    feats = rnd(1, 3, 4, 4) + 0.1
    weights = rnd(2, 3) - 0.5
    cam = rnd(1, 2, 4, 4)
    # keep every pairwise cosine away from the ReLU kink
    for _ in range(100):
        emb = cam_ops.embed_features(feats, weights)
        flat = emb.flatten(2)[0]
        cos = (flat.T @ flat) / (flat.norm(dim=0)[:, None] * flat.norm(dim=0)[None, :])
        if cos.abs().min() > 0.05:
            break
        weights = rnd(2, 3) - 0.5
    probe = rnd(1, 2, 4, 4) - 0.5
    results.append(
        check(
            "refine_cam",
            lambda: (cam_ops.refine_cam(cam, cam_ops.pixel_correlation(cam_ops.embed_features(feats, weights))) * probe).sum(),
            [cam, weights],
        )
    )
    raw = rnd(2, 2, 4, 4) - 0.5
    lprobe = rnd(2, 2) - 0.5
    results.append(check("cam_to_logits", lambda: (cam_ops.cam_to_logits(raw) * lprobe).sum(), [raw]))

    # objective terms at logits in [-5, 5]
    logits = rnd(4, 2) * 10 - 5
    targets = torch.tensor([[1, 1], [1, 0], [1, 1], [1, 0]], dtype=dt)
    results.append(check("multilabel_soft_margin", lambda: multilabel_soft_margin(logits, targets), [logits]))
    results.append(
        check("multilabel_soft_margin[+bg]", lambda: multilabel_soft_margin(logits, targets, True), [logits])
    )
    p_logits = rnd(4, 2) * 4 - 2
    labels = torch.tensor([1, 0, 1, 0])
    results.append(
        check("cross_entropy", lambda: cross_entropy(torch.softmax(p_logits, dim=-1), labels), [p_logits])
    )

    # MIL path: fuse -> attention -> gating -> classifier -> cross-entropy
    L, K, D = 3, 4, 3
    f_o, f_a = rnd(2, L, 3, 3), rnd(2, L, 3, 3)
    fuse = rnd(K, 2 * L) - 0.5
    w2, w1 = rnd(D, K) - 0.5, rnd(D) - 0.5
    cls_w, cls_b = rnd(2, K) - 0.5, rnd(2) - 0.5
    spec = AffineSpec.identity()
    for _ in range(200):
        bag = mil_ops.build_instance_bag(f_o, f_a, spec, fuse)
        pre = torch.einsum("dk,bkn->bdn", w2, bag.flatten(2))
        if pre.abs().min() > 0.02:
            break
        w2 = rnd(D, K) - 0.5
        fuse = rnd(K, 2 * L) - 0.5

    def mil_loss():
        bag = mil_ops.build_instance_bag(f_o, f_a, spec, fuse)
        gated = mil_ops.apply_attention(bag, mil_ops.attention_weights(bag, w1, w2))
        return cross_entropy(mil_ops.mil_classify(gated, cls_w, cls_b), labels[:2])

    results.append(check("mil_path", mil_loss, [fuse, w1, w2, cls_w, cls_b, f_o, f_a]))
    return results
