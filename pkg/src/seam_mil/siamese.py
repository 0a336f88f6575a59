"""Backbones and the weight-shared two-branch forward pass."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import cam as cam_ops
from . import mil as mil_ops
from .equivariance import AffineSpec, apply_affine
from .errors import ConfigError, NumericOverflowError

NUM_CLASSES = 2  # background, lesion
VARIANTS = ("full", "mil", "backbone")


@dataclass(frozen=True)
class BackboneSpec:
    kind: str = "toy_cnn"
    out_channels: int = 64
    out_stride: int = 8

    def __post_init__(self):
        if self.kind not in ("toy_cnn", "resnet38_like"):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        if self.out_channels < 8:
            raise ConfigError("backbone needs at least 8 output channels")
        if self.out_stride != 8:
            raise ConfigError("only output stride 8 is implemented")

    def check_input_size(self, image_size: int) -> None:
        if image_size % self.out_stride:
            raise ConfigError(f"image size {image_size} is not divisible by stride {self.out_stride}")

    def to_dict(self) -> dict:
        return asdict(self)


class ToyCNN(nn.Module):
    """Four conv stages with 2x max pooling after the first three: output stride 8.

    Stages 3-4 are 1x1 so the receptive field stays near 14 px and each
    output cell mostly reflects what lies inside its own 8x8 window.
    """

    def __init__(self, out_channels: int = 64):
        super().__init__()
        widths = [3, 16, 32, out_channels, out_channels]
        kernels = [3, 3, 1, 1]
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], k, padding=k // 2) for i, k in enumerate(kernels)
        )
        for conv in self.convs:
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)

    def forward(self, x):
        for i, conv in enumerate(self.convs):
            x = F.relu(conv(x))
            if i < 3:
                x = F.max_pool2d(x, 2)
        return x


class _ResBlock(nn.Module):
    def __init__(self, cin, cout, stride=1, dilation=1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, padding=dilation, dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=dilation, dilation=dilation, bias=False)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride, bias=False)

    def forward(self, x):
        pre = F.relu(self.bn1(x))
        skip = x if self.shortcut is None else self.shortcut(pre)
        out = self.conv1(pre)
        out = self.conv2(F.relu(self.bn2(out)))
        return out + skip


class ResNet38Like(nn.Module):
    """Pre-activation wide residual stack with dilated tail, output stride 8.

    A scaled-down stand-in for the ResNet38 segmentation backbone; not
    ImageNet-pretrained.
    """

    def __init__(self, out_channels: int = 512, width: int = 64):
        super().__init__()
        self.stem = nn.Conv2d(3, width, 3, padding=1, bias=False)
        self.blocks = nn.Sequential(
            _ResBlock(width, width * 2, stride=2),
            _ResBlock(width * 2, width * 4, stride=2),
            _ResBlock(width * 4, width * 8, stride=2),
            _ResBlock(width * 8, width * 8, dilation=2),
            _ResBlock(width * 8, out_channels, dilation=4),
        )
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, x):
        return F.relu(self.bn(self.blocks(self.stem(x))))


def build_backbone(spec: BackboneSpec) -> nn.Module:
    if spec.kind == "toy_cnn":
        return ToyCNN(spec.out_channels)
    return ResNet38Like(spec.out_channels)


class SeamMilNet(nn.Module):
    """Backbone plus CAM head, correlation embedding and attention-MIL head.

    ``variant`` selects the ablation: ``full`` (equivariant CAM branch + MIL),
    ``mil`` (MIL head only, no CAM losses) or ``backbone`` (global average
    pool + linear classifier).
    """

    def __init__(
        self,
        backbone: BackboneSpec = BackboneSpec(),
        embed_dim: Optional[int] = None,
        mil_channels: int = 128,
        attention_dim: int = 64,
        variant: str = "full",
        refine: bool = True,
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        L = backbone.out_channels
        E = embed_dim or max(1, L // 4)
        if E >= L:
            raise ConfigError("embedding width must be smaller than the feature width")
        self.backbone_spec = backbone
        self.variant = variant
        self.refine = refine
        self.backbone = build_backbone(backbone)
        self.cam_projection = nn.Parameter(torch.empty(NUM_CLASSES, L))
        self.embedding = nn.Parameter(torch.empty(E, L))
        self.fuse = nn.Parameter(torch.empty(mil_channels, 2 * L))
        self.w2 = nn.Parameter(torch.empty(attention_dim, mil_channels))
        self.w1 = nn.Parameter(torch.empty(attention_dim))
        self.classifier = nn.Linear(mil_channels, NUM_CLASSES)
        self.gap_classifier = nn.Linear(L, NUM_CLASSES)
        self.reset_heads()

    def reset_heads(self):
        for w in (self.cam_projection, self.embedding, self.fuse, self.w2):
            nn.init.kaiming_uniform_(w, a=math.sqrt(5))
        nn.init.uniform_(self.w1, -1 / math.sqrt(self.w1.numel()), 1 / math.sqrt(self.w1.numel()))

    def head_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("backbone.")]


def _finite(x: torch.Tensor, layer: str) -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NumericOverflowError(layer)
    return x


@dataclass
class SiameseOutputs:
    cam_orig: torch.Tensor
    cam_rm_orig: torch.Tensor
    cam_af: torch.Tensor
    cam_rm_af: torch.Tensor
    f_orig: torch.Tensor
    f_af: torch.Tensor
    mil_probs: torch.Tensor
    logits_orig: torch.Tensor
    logits_af: torch.Tensor
    attention: Optional[torch.Tensor] = None
    raw_cam_orig: Optional[torch.Tensor] = None


def _branch(model: SeamMilNet, images: torch.Tensor, tag: str):
    f = _finite(model.backbone(images), f"backbone[{tag}]")
    raw = _finite(cam_ops.compute_cam(f, model.cam_projection), f"cam_head[{tag}]")
    logits = cam_ops.cam_to_logits(raw)
    cam_n = cam_ops.normalize_cam(raw)
    if model.refine:
        emb = _finite(cam_ops.embed_features(f, model.embedding), f"embedding[{tag}]")
        cam_rm = cam_ops.refine_cam(cam_n, cam_ops.pixel_correlation(emb))
    else:
        cam_rm = cam_n
    return f, raw, logits, cam_n, cam_rm


def forward_siamese(model: SeamMilNet, images: torch.Tensor, spec: AffineSpec) -> SiameseOutputs:
    """Run the original and the ``spec``-transformed images through the same parameters.

    ``images`` is ``(B, 3, H, W)``.
    """
    f_o, raw_o, logits_o, cam_o, rm_o = _branch(model, images, "orig")
    if model.variant == "backbone":
        logits = model.gap_classifier(f_o.mean(dim=(-2, -1)))
        probs = _finite(torch.softmax(logits, dim=-1), "gap_classifier")
        return SiameseOutputs(cam_o, rm_o, cam_o, rm_o, f_o, f_o, probs, logits_o, logits_o, None, raw_o)

    if model.variant == "mil":
        spec_used = AffineSpec.identity()
        f_a, logits_a, cam_a, rm_a = f_o, logits_o, cam_o, rm_o
    else:
        spec_used = spec
        f_a, _, logits_a, cam_a, rm_a = _branch(model, apply_affine(images, spec), "affine")

    bag = _finite(mil_ops.build_instance_bag(f_o, f_a, spec_used, model.fuse), "mil_fuse")
    att = _finite(mil_ops.attention_weights(bag, model.w1, model.w2), "mil_attention")
    gated = mil_ops.apply_attention(bag, att)
    probs = _finite(mil_ops.mil_classify(gated, model.classifier.weight, model.classifier.bias), "mil_classifier")
    return SiameseOutputs(cam_o, rm_o, cam_a, rm_a, f_o, f_a, probs, logits_o, logits_a, att, raw_o)
