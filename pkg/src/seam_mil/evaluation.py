"""Classification metrics, CAM-to-mask conversion, segmentation scores and heatmap export."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.stats import rankdata

from .equivariance import AffineSpec
from .errors import DimensionError, UndefinedMetricError
from .objective import LossBreakdown
from .siamese import SeamMilNet, forward_siamese


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC from average ranks: ties between classes count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative labels")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(scores, labels) -> list[tuple[float, float, float]]:
    """(threshold, fpr, tpr) at every distinct score, highest threshold first."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    pts = [(float("inf"), 0.0, 0.0)]
    for t in np.unique(s)[::-1]:
        pred = s >= t
        pts.append((float(t), float((pred & ~y).sum() / max((~y).sum(), 1)), float((pred & y).sum() / max(y.sum(), 1))))
    return pts


def accuracy_f1(probs, labels, threshold: float = 0.5) -> tuple[float, float]:
    """``probs`` is either the lesion probability per sample or ``(N, 2)`` softmax rows."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 2:
        p = p[:, 1]
    y = np.asarray(labels).ravel().astype(bool)
    if len(y) == 0:
        raise UndefinedMetricError("no samples")
    pred = p >= threshold
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    accuracy = float((pred == y).mean())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return accuracy, float(f1)


def cam_to_segmentation(cam, threshold: float = 0.5) -> np.ndarray:
    """Binary lesion mask from channel 1 of a normalized ``(2, H, W)`` CAM."""
    c = cam.detach().cpu().numpy() if isinstance(cam, torch.Tensor) else np.asarray(cam)
    return (c[1] >= threshold).astype(np.uint8)


@dataclass
class SegmentationScore:
    iou: float
    dice: float
    threshold: float = 0.5


def segmentation_score(mask, truth, threshold: float = 0.5) -> SegmentationScore:
    a = np.asarray(mask).astype(bool)
    b = np.asarray(truth).astype(bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask {a.shape} and ground truth {b.shape} differ")
    inter = int((a & b).sum())
    union = int((a | b).sum())
    total = int(a.sum() + b.sum())
    iou = inter / union if union else 1.0
    dice = 2 * inter / total if total else 1.0
    return SegmentationScore(float(iou), float(dice), threshold)


@dataclass
class MetricsReport:
    split: str
    accuracy: float
    f1: float
    auroc: float
    n_samples: int
    threshold: float = 0.5
    loss_breakdown: Optional[LossBreakdown] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.loss_breakdown is None:
            d.pop("loss_breakdown")
        return d


@torch.no_grad()
def predict(model: SeamMilNet, dataset, spec: AffineSpec, batch_size: int = 32):
    """MIL lesion probabilities plus original and refined CAMs, bilinearly upsampled to input size.

    Both CAMs keep their [0, 1] range; refined maps are not re-peaked.
    """
    model.eval()
    probs, cams, refined = [], [], []
    for start in range(0, len(dataset), batch_size):
        items = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
        x = torch.from_numpy(np.stack([it[0] for it in items]).transpose(0, 3, 1, 2).copy()).float()
        out = forward_siamese(model, x, spec)
        size = tuple(x.shape[-2:])
        probs.append(out.mil_probs[:, 1].numpy())
        cams.append(upsample_cam(out.cam_orig, size).numpy())
        refined.append(upsample_cam(out.cam_rm_orig, size).numpy())
    return np.concatenate(probs), np.concatenate(cams), np.concatenate(refined)


def upsample_cam(cam: torch.Tensor, size) -> torch.Tensor:
    return F.interpolate(cam, size=size, mode="bilinear", align_corners=False)


def evaluate(model: SeamMilNet, dataset, spec: AffineSpec, threshold: float = 0.5, split: str = "test") -> MetricsReport:
    probs, _, _ = predict(model, dataset, spec)
    labels = np.asarray(dataset.labels)
    acc, f1 = accuracy_f1(probs, labels, threshold)
    return MetricsReport(split, acc, f1, auroc(probs, labels), len(labels), threshold)


def cam_iou(model: SeamMilNet, dataset, spec: AffineSpec, threshold: float = 0.5) -> dict:
    """Mean IoU of original and refined CAM masks against ground truth, over positives only."""
    if dataset.masks is None:
        raise UndefinedMetricError("dataset has no ground-truth masks")
    _, cams, refined = predict(model, dataset, spec)
    pos = np.flatnonzero(np.asarray(dataset.labels) == 1)
    orig_iou = [segmentation_score(cam_to_segmentation(cams[i], threshold), dataset.masks[i]).iou for i in pos]
    ref_iou = [segmentation_score(cam_to_segmentation(refined[i], threshold), dataset.masks[i]).iou for i in pos]
    return {"original": float(np.mean(orig_iou)), "refined": float(np.mean(ref_iou)), "n_positives": int(len(pos))}


def _colormap(values: np.ndarray) -> np.ndarray:
    from matplotlib import colormaps

    return colormaps["jet"](np.clip(values, 0.0, 1.0))[..., :3]


def export_heatmap(cam, base_image: np.ndarray, out_path: Union[str, Path], alpha: float = 0.5) -> Path:
    """Write a PNG of the lesion channel blended over ``base_image`` and a ``.npy`` sidecar of the raw CAM.

    ``base_image`` is ``(H, W, 3)`` in [0, 1]; the CAM is resized to it.
    """
    out_path = Path(out_path)
    c = cam.detach().cpu().numpy() if isinstance(cam, torch.Tensor) else np.asarray(cam)
    h, w = base_image.shape[:2]
    lesion = torch.from_numpy(np.ascontiguousarray(c[1], dtype=np.float32))[None, None]
    lesion = F.interpolate(lesion, size=(h, w), mode="bilinear", align_corners=False)[0, 0].numpy()
    overlay = (1 - alpha) * base_image[..., :3] + alpha * _colormap(lesion)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.clip(np.rint(overlay * 255), 0, 255).astype(np.uint8)).save(out_path, format="PNG")
        np.save(sidecar_path(out_path), c)
    except OSError as exc:
        raise OSError(f"cannot write heatmap to {out_path}: {exc}") from exc
    return out_path


def sidecar_path(png_path: Union[str, Path]) -> Path:
    return Path(png_path).with_suffix(".npy")


def load_sidecar(png_path: Union[str, Path]) -> np.ndarray:
    return np.load(sidecar_path(png_path))
