import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from seam_mil.data import SynthConfig, generate_synthetic
from seam_mil.equivariance import AffineSpec
from seam_mil.errors import DimensionError, UndefinedMetricError
from seam_mil.evaluation import (
    MetricsReport,
    accuracy_f1,
    auroc,
    cam_iou,
    cam_to_segmentation,
    evaluate,
    export_heatmap,
    load_sidecar,
    predict,
    roc_points,
    segmentation_score,
)
from seam_mil.objective import LossBreakdown
from seam_mil.siamese import BackboneSpec, SeamMilNet


def pairwise_auroc(scores, labels):
    """O(N^2) count over every (positive, negative) pair, ties worth one half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def confusion_f1(preds, labels):
    tp = sum(1 for p, y in zip(preds, labels) if p and y)
    fp = sum(1 for p, y in zip(preds, labels) if p and not y)
    fn = sum(1 for p, y in zip(preds, labels) if not p and y)
    acc = sum(1 for p, y in zip(preds, labels) if bool(p) == bool(y)) / len(labels)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return acc, f1, prec, rec


# ----------------------------------------------------------------------------- auroc


def test_auroc_examples():
    assert auroc([0.9, 0.1], [1, 0]) == 1.0
    assert auroc([0.8, 0.8, 0.3], [1, 0, 0]) == 0.75
    with pytest.raises(UndefinedMetricError):
        auroc([0.2, 0.4], [1, 1])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 200), st.integers(0, 2**31 - 1), st.integers(2, 20))
def test_auroc_equals_pairwise_oracle(n, seed, levels):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    scores = rng.integers(0, levels, n) / levels  # coarse grid forces ties
    assert auroc(scores, labels) == pytest.approx(pairwise_auroc(scores, labels), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_auroc_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    labels = np.r_[0, 1, rng.integers(0, 2, 40)]
    scores = rng.normal(size=42)
    assert auroc(scores, labels) == pytest.approx(auroc(np.exp(3 * scores) + 7, labels), abs=1e-12)


def test_roc_points_are_monotone():
    pts = roc_points([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    fprs, tprs = [p[1] for p in pts], [p[2] for p in pts]
    assert fprs == sorted(fprs) and tprs == sorted(tprs)
    assert pts[-1][1:] == (1.0, 1.0)


# ----------------------------------------------------------------------------- accuracy / F1


def test_accuracy_f1_examples():
    assert accuracy_f1([0.9, 0.1], [1, 0]) == (1.0, 1.0)
    assert accuracy_f1([0.9, 0.8, 0.2, 0.1], [1, 0, 1, 0]) == (0.5, 0.5)
    assert accuracy_f1([0.1, 0.2], [0, 0]) == (1.0, 0.0)


def test_accuracy_f1_accepts_softmax_rows():
    rows = np.array([[0.2, 0.8], [0.7, 0.3]])
    assert accuracy_f1(rows, [1, 0]) == (1.0, 1.0)


def test_threshold_is_inclusive():
    assert accuracy_f1([0.5], [1]) == (1.0, 1.0)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 100), st.integers(0, 2**31 - 1), st.floats(0.05, 0.95))
def test_accuracy_f1_match_confusion_matrix(n, seed, threshold):
    rng = np.random.default_rng(seed)
    probs, labels = rng.random(n), rng.integers(0, 2, n)
    acc, f1 = accuracy_f1(probs, labels, threshold)
    exp_acc, exp_f1, prec, rec = confusion_f1(probs >= threshold, labels)
    assert acc == pytest.approx(exp_acc) and f1 == pytest.approx(exp_f1)
    assert 0 <= f1 <= max(prec, rec) + 1e-12
    err = np.mean((probs >= threshold) != labels.astype(bool))
    assert acc + err == pytest.approx(1.0)


def test_accuracy_f1_needs_samples():
    with pytest.raises(UndefinedMetricError):
        accuracy_f1([], [])


# ----------------------------------------------------------------------------- masks and scores


def test_cam_to_segmentation_examples():
    cam = np.zeros((2, 2, 2))
    assert cam_to_segmentation(cam).sum() == 0
    cam[1] = [[0.2, 0.7], [0.5, 0.4]]
    assert cam_to_segmentation(cam, 0.5).tolist() == [[0, 1], [1, 0]]
    assert cam_to_segmentation(cam, 0.0).all()
    assert cam_to_segmentation(torch.tensor(cam), 0.5).tolist() == [[0, 1], [1, 0]]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1))
def test_segmentation_monotone_in_threshold(seed, t1, t2):
    lo, hi = min(t1, t2), max(t1, t2)
    cam = np.random.default_rng(seed).random((2, 6, 6))
    assert np.all(cam_to_segmentation(cam, hi) <= cam_to_segmentation(cam, lo))


def test_segmentation_score_examples():
    a = np.array([[1, 1], [0, 0]])
    assert segmentation_score(a, a).iou == 1 and segmentation_score(a, a).dice == 1
    assert segmentation_score(a, 1 - a).iou == 0 and segmentation_score(a, 1 - a).dice == 0
    assert segmentation_score(np.zeros((2, 2)), np.zeros((2, 2))).iou == 1
    a = np.zeros(8, int)
    b = np.zeros(8, int)
    a[:4] = 1
    b[2:6] = 1
    s = segmentation_score(a, b)
    assert s.iou == pytest.approx(1 / 3) and s.dice == 0.5
    with pytest.raises(DimensionError):
        segmentation_score(np.zeros((2, 2)), np.zeros((3, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_dice_at_least_iou(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((5, 5)) > 0.5, rng.random((5, 5)) > 0.5
    s = segmentation_score(a, b)
    assert s.dice >= s.iou - 1e-12


# ----------------------------------------------------------------------------- model-level helpers


@pytest.fixture(scope="module")
def model_and_data():
    torch.manual_seed(0)
    model = SeamMilNet(BackboneSpec(out_channels=16))
    return model, generate_synthetic(SynthConfig(n_images=8, seed=21))


def test_predict_shapes_and_ranges(model_and_data):
    model, data = model_and_data
    probs, cams, refined = predict(model, data, AffineSpec.rescale(0.4), batch_size=3)
    assert probs.shape == (8,) and cams.shape == refined.shape == (8, 2, 64, 64)
    assert ((probs > 0) & (probs < 1)).all()
    for m in (cams, refined):
        assert m.min() >= 0 and m.max() <= 1


def test_evaluate_and_report(model_and_data):
    model, data = model_and_data
    report = evaluate(model, data, AffineSpec.rescale(0.4), split="test")
    assert report.n_samples == 8 and report.split == "test"
    d = report.to_dict()
    assert set(d) == {"split", "accuracy", "f1", "auroc", "n_samples", "threshold"}
    with_loss = MetricsReport("val", 1.0, 1.0, 1.0, 2, loss_breakdown=LossBreakdown(1, 2, 3, 4, 10))
    assert with_loss.to_dict()["loss_breakdown"]["total"] == 10


def test_cam_iou_needs_masks(model_and_data):
    model, data = model_and_data
    out = cam_iou(model, data, AffineSpec.rescale(0.4))
    assert out["n_positives"] == 4 and 0 <= out["original"] <= 1 and 0 <= out["refined"] <= 1
    no_masks = data.subset(range(8))
    no_masks.masks = None
    with pytest.raises(UndefinedMetricError):
        cam_iou(model, no_masks, AffineSpec.rescale(0.4))


# ----------------------------------------------------------------------------- heatmap export


def test_export_heatmap_is_deterministic_and_round_trips(tmp_path):
    rng = np.random.default_rng(0)
    cam = rng.random((2, 8, 8)).astype(np.float32)
    base = rng.random((32, 32, 3)).astype(np.float32)
    a = export_heatmap(cam, base, tmp_path / "a.png")
    b = export_heatmap(cam, base, tmp_path / "b.png")
    assert a.read_bytes() == b.read_bytes()
    assert np.allclose(load_sidecar(a), cam)


def test_zero_cam_overlay_is_base_tinted_by_colormap_zero(tmp_path):
    from matplotlib import colormaps
    from PIL import Image

    base = np.full((4, 4, 3), 0.5, dtype=np.float32)
    out = export_heatmap(np.zeros((2, 4, 4)), base, tmp_path / "z.png", alpha=0.5)
    zero_color = np.array(colormaps["jet"](0.0)[:3])
    expected = np.rint((0.5 * base + 0.5 * zero_color) * 255)
    assert np.array_equal(np.asarray(Image.open(out)).astype(float), expected)


def test_export_to_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        export_heatmap(np.zeros((2, 4, 4)), np.zeros((4, 4, 3)), blocker / "sub" / "h.png")
