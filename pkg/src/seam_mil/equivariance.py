"""Invertible spatial transforms and the equivariant consistency losses between Siamese branches."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DimensionError, InvalidSpecError

KINDS = ("identity", "rescale", "hflip", "vflip", "rotation")


@dataclass(frozen=True)
class AffineSpec:
    kind: str = "identity"
    scale_factor: float = 1.0
    angle: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpecError(f"unknown affine kind {self.kind!r}")
        if not self.scale_factor > 0:
            raise InvalidSpecError("scale_factor must be positive")
        if self.kind == "rotation" and self.angle % 90 != 0:
            raise InvalidSpecError("rotation angle must be a multiple of 90 degrees")

    @classmethod
    def identity(cls) -> "AffineSpec":
        return cls("identity")

    @classmethod
    def rescale(cls, factor: float) -> "AffineSpec":
        return cls("rescale", scale_factor=float(factor))

    @classmethod
    def rotation(cls, angle: int) -> "AffineSpec":
        return cls("rotation", angle=int(angle))

    def inverse(self) -> "AffineSpec":
        if self.kind == "rescale":
            return AffineSpec.rescale(1.0 / self.scale_factor)
        if self.kind == "rotation":
            return AffineSpec.rotation(-self.angle)
        return self

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        if self.kind == "rescale":
            return _round_half_up(height * self.scale_factor), _round_half_up(width * self.scale_factor)
        if self.kind == "rotation" and (self.angle // 90) % 2:
            return width, height
        return height, width

    def to_dict(self) -> dict:
        if self.kind == "rescale":
            return {"kind": self.kind, "scale_factor": self.scale_factor}
        if self.kind == "rotation":
            return {"kind": self.kind, "angle": self.angle}
        return {"kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "AffineSpec":
        return cls(
            kind=d.get("kind", "identity"),
            scale_factor=float(d.get("scale_factor", 1.0)),
            angle=int(d.get("angle", 0)),
        )

    @classmethod
    def parse(cls, text: str) -> "AffineSpec":
        """Parse ``identity``, ``hflip``, ``vflip``, ``rescale:0.4`` or ``rotation:90``."""
        kind, _, param = text.strip().partition(":")
        if kind == "rescale":
            return cls.rescale(float(param or 1.0))
        if kind == "rotation":
            return cls.rotation(int(param or 0))
        return cls(kind)

    def __str__(self) -> str:
        if self.kind == "rescale":
            return f"rescale:{self.scale_factor:g}"
        if self.kind == "rotation":
            return f"rotation:{self.angle}"
        return self.kind


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _resize(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    lead = x.shape[:-2]
    flat = x.reshape(-1, 1, *x.shape[-2:])
    out = F.interpolate(flat, size=size, mode="bilinear", align_corners=False)
    return out.reshape(*lead, *size)


def apply_affine(x: torch.Tensor, spec: AffineSpec) -> torch.Tensor:
    """Transform the last two (spatial) dimensions of ``x``.

    Rescale is bilinear with round-half-up output dims; flips and rotations
    are exact index permutations.
    """
    if x.dim() < 2 or min(x.shape[-2:]) < 1:
        raise InvalidSpecError(f"cannot transform a map of shape {tuple(x.shape)}")
    if spec.kind == "identity":
        return x.clone()
    if spec.kind == "hflip":
        return torch.flip(x, dims=(-1,))
    if spec.kind == "vflip":
        return torch.flip(x, dims=(-2,))
    if spec.kind == "rotation":
        return torch.rot90(x, k=(spec.angle // 90) % 4, dims=(-2, -1))
    size = spec.output_size(*x.shape[-2:])
    if min(size) < 1:
        raise InvalidSpecError(f"rescale by {spec.scale_factor} collapses {tuple(x.shape[-2:])} to {size}")
    return _resize(x, size)


def align_to(x: torch.Tensor, size: tuple[int, int], tolerance: int = 1) -> torch.Tensor:
    """Center-crop or zero-pad the spatial dims to ``size``, by at most ``tolerance`` cells per side."""
    h, w = x.shape[-2:]
    th, tw = size
    if abs(h - th) > tolerance or abs(w - tw) > tolerance:
        raise DimensionError(f"spatial dims {(h, w)} cannot be aligned to {size}")
    if (h, w) == (th, tw):
        return x
    # crop
    top = max(h - th, 0) // 2
    left = max(w - tw, 0) // 2
    x = x[..., top : top + min(h, th), left : left + min(w, tw)]
    # pad
    ph, pw = th - x.shape[-2], tw - x.shape[-1]
    if ph or pw:
        x = F.pad(x, (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2))
    return x


def invert_affine(x: torch.Tensor, spec: AffineSpec, size: tuple[int, int]) -> torch.Tensor:
    """Bring a map from the transformed frame back onto the original ``size`` grid."""
    if spec.kind == "rescale":
        return _resize(x, tuple(size))
    out = apply_affine(x, spec.inverse())
    if tuple(out.shape[-2:]) != tuple(size):
        raise DimensionError(f"inverse transform gives {tuple(out.shape[-2:])}, expected {tuple(size)}")
    return out


def transform_to(x: torch.Tensor, spec: AffineSpec, target: torch.Tensor) -> torch.Tensor:
    """AF(x), cropped/padded to ``target``'s spatial dims if rounding disagrees by one cell."""
    out = apply_affine(x, spec)
    if out.shape[:-2] != target.shape[:-2]:
        raise DimensionError(f"maps {tuple(out.shape)} and {tuple(target.shape)} differ in leading dims")
    if spec.kind == "rescale":
        return align_to(out, tuple(target.shape[-2:]))
    if out.shape != target.shape:
        raise DimensionError(f"transformed map {tuple(out.shape)} does not match {tuple(target.shape)}")
    return out


def l1_mean(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"L1 between mismatched shapes {tuple(a.shape)} and {tuple(b.shape)}")
    return (a - b).abs().mean()


def er_loss(cam_orig: torch.Tensor, cam_af: torch.Tensor, spec: AffineSpec) -> torch.Tensor:
    """Mean |AF(cam_orig) - cam_af|."""
    return l1_mean(transform_to(cam_orig, spec, cam_af), cam_af)


def ecr_loss(
    cam_orig: torch.Tensor,
    cam_rm_orig: torch.Tensor,
    cam_af: torch.Tensor,
    cam_rm_af: torch.Tensor,
    spec: AffineSpec,
    stop_refined_grad: bool = False,
) -> torch.Tensor:
    """Cross-branch L1: raw CAM of each branch against the refined CAM of the other."""
    if stop_refined_grad:
        cam_rm_orig, cam_rm_af = cam_rm_orig.detach(), cam_rm_af.detach()
    return l1_mean(transform_to(cam_orig, spec, cam_rm_af), cam_rm_af) + l1_mean(
        transform_to(cam_rm_orig, spec, cam_af), cam_af
    )
