"""SGD training loop with polynomial LR decay, checkpoints and a JSON-lines metrics stream."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .data import AugmentConfig, augment
from .equivariance import AffineSpec, ecr_loss, er_loss
from .errors import ConfigError, ScheduleExhaustedError, TrainingAborted
from .objective import (
    LossBreakdown,
    cross_entropy,
    multilabel_soft_margin,
    multilabel_tensor,
    total_loss,
)
from .siamese import VARIANTS, BackboneSpec, SeamMilNet, forward_siamese

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "seam-mil-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    base_lr: float = 0.001
    lr_multiplier_new_params: float = 10.0
    decay_power: float = 0.9
    weight_decay: float = 0.0005
    momentum: float = 0.0
    batch_size: int = 3
    epochs: int = 100
    affine: AffineSpec = field(default_factory=lambda: AffineSpec.rescale(0.4))
    seed: int = 0
    loss_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    variant: str = "full"
    refine: bool = True
    include_background: bool = False
    stop_refined_grad: bool = False
    augment: bool = True
    consistency_warmup_epochs: float = 0.0
    grad_clip_norm: Optional[float] = None
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    embed_dim: Optional[int] = None
    mil_channels: int = 128
    attention_dim: int = 64

    def __post_init__(self):
        if isinstance(self.affine, str):
            self.affine = AffineSpec.parse(self.affine)
        elif isinstance(self.affine, dict):
            self.affine = AffineSpec.from_dict(self.affine)
        if isinstance(self.backbone, dict):
            self.backbone = BackboneSpec(**self.backbone)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if min(self.base_lr, self.lr_multiplier_new_params, self.decay_power) <= 0 or self.weight_decay < 0:
            raise ConfigError("learning rates and decay power must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if len(self.loss_weights) != 4:
            raise ConfigError("loss_weights needs four entries")
        if self.consistency_warmup_epochs < 0:
            raise ConfigError("consistency_warmup_epochs must be non-negative")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            raise ConfigError("grad_clip_norm must be positive when set")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["affine"] = self.affine.to_dict()
        d["backbone"] = self.backbone.to_dict()
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


def build_model(cfg: TrainConfig) -> SeamMilNet:
    return SeamMilNet(
        cfg.backbone,
        embed_dim=cfg.embed_dim,
        mil_channels=cfg.mil_channels,
        attention_dim=cfg.attention_dim,
        variant=cfg.variant,
        refine=cfg.refine,
    )


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig, new_params: bool = False) -> float:
    """``base_lr * (1 - step / total_steps) ** decay_power``, times the multiplier for new heads."""
    if step < 0 or step > total_steps:
        raise ScheduleExhaustedError(f"step {step} outside schedule of {total_steps} steps")
    lr = cfg.base_lr * (1.0 - step / total_steps) ** cfg.decay_power
    return lr * cfg.lr_multiplier_new_params if new_params else lr


def _param_groups(model: SeamMilNet, cfg: TrainConfig) -> list[dict]:
    """Backbone vs new heads, each split into decayed weights and undecayed biases/vectors."""
    groups = {(new, decay): [] for new in (False, True) for decay in (False, True)}
    for name, p in model.named_parameters():
        new = not name.startswith("backbone.")
        decay = p.dim() >= 2
        groups[(new, decay)].append(p)
    return [
        {"params": ps, "new": new, "weight_decay": cfg.weight_decay if decay else 0.0}
        for (new, decay), ps in groups.items()
        if ps
    ]


@dataclass
class TrainState:
    model: SeamMilNet
    optimizer: torch.optim.Optimizer
    cfg: TrainConfig
    total_steps: int
    step: int = 0
    epoch: int = 0
    generator: torch.Generator = field(default_factory=torch.Generator)
    aug_rng: np.random.Generator = field(default_factory=np.random.default_rng)
    last_checkpoint: Optional[Path] = None


def init_state(cfg: TrainConfig, total_steps: int) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = build_model(cfg)
    opt = torch.optim.SGD(_param_groups(model, cfg), lr=cfg.base_lr, momentum=cfg.momentum)
    gen = torch.Generator().manual_seed(cfg.seed)
    return TrainState(model, opt, cfg, total_steps, generator=gen, aug_rng=np.random.default_rng(cfg.seed))


def consistency_ramp(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear 0 -> 1 ramp of the ER/ECR weights over the warm-up epochs (1 when warm-up is off)."""
    if cfg.consistency_warmup_epochs <= 0:
        return 1.0
    return min(1.0, step / (cfg.consistency_warmup_epochs * steps_per_epoch))


def compute_losses(model: SeamMilNet, images: torch.Tensor, labels: torch.Tensor, cfg: TrainConfig, ramp: float = 1.0):
    """Forward both branches and return (total tensor, LossBreakdown, outputs).

    ``ramp`` scales the ER and ECR weights during warm-up.
    """
    out = forward_siamese(model, images, cfg.affine)
    ce = cross_entropy(out.mil_probs, labels)
    zero = ce.new_zeros(())
    if model.variant == "full":
        targets = multilabel_tensor(labels)
        mc = 0.5 * (
            multilabel_soft_margin(out.logits_orig, targets, cfg.include_background)
            + multilabel_soft_margin(out.logits_af, targets, cfg.include_background)
        )
        er = er_loss(out.cam_orig, out.cam_af, cfg.affine)
        ecr = ecr_loss(out.cam_orig, out.cam_rm_orig, out.cam_af, out.cam_rm_af, cfg.affine, cfg.stop_refined_grad)
    else:
        mc = er = ecr = zero
    w_mc, w_er, w_ecr, w_ce = cfg.loss_weights
    total = total_loss((mc, er, ecr, ce), (w_mc, ramp * w_er, ramp * w_ecr, w_ce))
    parts = LossBreakdown(*(float(t.detach()) for t in (mc, er, ecr, ce, total)))
    return total, parts, out


def training_step(batch, state: TrainState) -> LossBreakdown:
    """One SGD update on ``batch = (images (B,3,H,W), labels (B,))``; advances ``state`` in place."""
    images, labels = batch
    if len(labels) == 0:
        raise ConfigError("empty batch")
    cfg = state.cfg
    for g in state.optimizer.param_groups:
        g["lr"] = lr_schedule(state.step, state.total_steps, cfg, new_params=g["new"])
    state.model.train()
    ramp = consistency_ramp(state.step, state.total_steps // cfg.epochs, cfg)
    total, parts, _ = compute_losses(state.model, images, labels, cfg, ramp)
    if not math.isfinite(parts.total):
        raise TrainingAborted(state.step, state.last_checkpoint)
    state.optimizer.zero_grad(set_to_none=False)
    total.backward()
    if cfg.grad_clip_norm is not None:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), cfg.grad_clip_norm)
    state.optimizer.step()
    state.step += 1
    return parts


def to_batch(images: list[np.ndarray], labels: list[int]):
    x = torch.from_numpy(np.ascontiguousarray(np.stack(images).transpose(0, 3, 1, 2))).float()
    return x, torch.as_tensor(labels, dtype=torch.long)


def _epoch_batches(dataset, state: TrainState):
    cfg = state.cfg
    order = torch.randperm(len(dataset), generator=state.generator).tolist()
    for start in range(0, len(order), cfg.batch_size):
        imgs, labs = [], []
        for i in order[start : start + cfg.batch_size]:
            img, lab, _ = dataset[i]
            if cfg.augment:
                img = augment(img, state.aug_rng, AugmentConfig())
            imgs.append(img)
            labs.append(lab)
        yield to_batch(imgs, labs)


def save_checkpoint(state: TrainState, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": state.cfg.to_dict(),
            "model": state.model.state_dict(),
            "optimizer": state.optimizer.state_dict(),
            "step": state.step,
            "epoch": state.epoch,
            "total_steps": state.total_steps,
            "rng": {
                "torch": state.generator.get_state(),
                "numpy": state.aug_rng.bit_generator.state,
            },
        },
        path,
    )
    state.last_checkpoint = path
    return path


def load_checkpoint(path: Union[str, Path]) -> TrainState:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a seam-mil checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {blob.get('version')}")
    cfg = TrainConfig.from_dict(blob["config"])
    state = init_state(cfg, blob["total_steps"])
    state.model.load_state_dict(blob["model"])
    state.optimizer.load_state_dict(blob["optimizer"])
    state.step, state.epoch = blob["step"], blob["epoch"]
    state.generator.set_state(blob["rng"]["torch"])
    state.aug_rng.bit_generator.state = blob["rng"]["numpy"]
    state.last_checkpoint = Path(path)
    return state


def fit(
    dataset,
    cfg: TrainConfig,
    out_dir: Union[str, Path, None] = None,
    val_set=None,
    threshold: float = 0.5,
) -> TrainState:
    """Train for ``cfg.epochs`` epochs of ``ceil(N / batch_size)`` steps.

    With ``out_dir`` set, writes ``metrics.jsonl`` (one record per step),
    ``checkpoints/epoch_XXX.pt`` after every epoch, and ``metrics.json``
    (the evaluation report on ``val_set``, or on the training set).
    """
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    if not np.isin(np.asarray(dataset.labels), (0, 1)).all():
        raise ConfigError("labels must be binary")
    cfg.backbone.check_input_size(dataset.image_size)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    state = init_state(cfg, cfg.epochs * steps_per_epoch)
    out = Path(out_dir) if out_dir is not None else None
    stream = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        stream = open(out / "metrics.jsonl", "w")
    try:
        for epoch in range(cfg.epochs):
            for batch in _epoch_batches(dataset, state):
                parts = training_step(batch, state)
                if stream is not None:
                    rec = {"step": state.step, "epoch": epoch, "lr": lr_schedule(state.step - 1, state.total_steps, cfg)}
                    rec.update(parts.to_dict())
                    stream.write(json.dumps(rec) + "\n")
            state.epoch = epoch + 1
            log.info("epoch %d/%d  loss %.4f", epoch + 1, cfg.epochs, parts.total)
            if out is not None:
                save_checkpoint(state, out / "checkpoints" / f"epoch_{epoch + 1:03d}.pt")
    finally:
        if stream is not None:
            stream.close()
    if out is not None:
        from .evaluation import evaluate

        report = evaluate(state.model, val_set if val_set is not None else dataset, cfg.affine, threshold,
                          split="val" if val_set is not None else "train")
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return state
