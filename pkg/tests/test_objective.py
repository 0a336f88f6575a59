import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from seam_mil.objective import (
    LossBreakdown,
    MultiLabel,
    cross_entropy,
    decode_labels,
    encode_labels,
    multilabel_soft_margin,
    multilabel_tensor,
    total_loss,
)


def test_label_encoding():
    assert encode_labels(True) == MultiLabel(1, 1)
    assert encode_labels(False) == MultiLabel(1, 0)
    for x in (True, False):
        assert decode_labels(encode_labels(x)) is x
    assert multilabel_tensor(torch.tensor([1, 0])).tolist() == [[1.0, 1.0], [1.0, 0.0]]


# ----------------------------------------------------------------------------- cross_entropy


def test_confident_correct_is_near_zero():
    assert cross_entropy(torch.tensor([1.0, 0.0], dtype=torch.float64), 0).item() == pytest.approx(0.0, abs=1e-11)


def test_confident_wrong_is_clamped():
    assert cross_entropy(torch.tensor([1.0, 0.0], dtype=torch.float64), 1).item() == pytest.approx(-math.log(1e-12))


@pytest.mark.parametrize("label", [0, 1])
def test_uniform_gives_log_two(label):
    assert cross_entropy(torch.tensor([0.5, 0.5]), label).item() == pytest.approx(math.log(2), abs=1e-6)


def test_quarter_probability():
    assert cross_entropy(torch.tensor([0.25, 0.75]), 0).item() == pytest.approx(math.log(4), abs=1e-6)


def test_batched_cross_entropy_is_mean():
    probs = torch.tensor([[0.25, 0.75], [0.5, 0.5]], dtype=torch.float64)
    assert cross_entropy(probs, torch.tensor([0, 1])).item() == pytest.approx((math.log(4) + math.log(2)) / 2)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 1 - 1e-6), st.integers(0, 1))
def test_cross_entropy_nonnegative(p, label):
    assert cross_entropy(torch.tensor([1 - p, p], dtype=torch.float64), label).item() >= 0


# ----------------------------------------------------------------------------- multilabel soft margin


def _lesion_only(logit, label):
    return multilabel_soft_margin(torch.tensor([0.0, logit], dtype=torch.float64), [1, label]).item()


def test_soft_margin_examples():
    assert _lesion_only(0.0, 1) == pytest.approx(math.log(2))
    assert _lesion_only(50.0, 1) == pytest.approx(0.0, abs=1e-20)
    assert _lesion_only(2.0, 0) == pytest.approx(math.log(1 + math.exp(2)), abs=1e-4)
    assert math.isfinite(_lesion_only(-1000.0, 1))


def test_background_channel_is_ignored_by_default():
    a = multilabel_soft_margin(torch.tensor([[-7.0, 1.0]]), [[1, 1]])
    b = multilabel_soft_margin(torch.tensor([[3.0, 1.0]]), [[1, 1]])
    assert a.item() == b.item()


def test_background_channel_included_on_request():
    logits = torch.tensor([[0.0, 2.0]], dtype=torch.float64)
    got = multilabel_soft_margin(logits, [[1, 0]], include_background=True).item()
    assert got == pytest.approx((math.log(2) + math.log(1 + math.exp(2))) / 2)


@settings(max_examples=60, deadline=None)
@given(st.floats(-20, 20), st.floats(0.01, 5))
def test_soft_margin_monotone_in_logit(y, step):
    assert _lesion_only(y + step, 1) < _lesion_only(y, 1)
    assert _lesion_only(y + step, 0) > _lesion_only(y, 0)


# ----------------------------------------------------------------------------- total_loss


def test_total_loss_examples():
    assert total_loss((0.0, 0.0, 0.0, 0.0)) == 0
    assert total_loss((1.0, 2.0, 3.0, 4.0)) == 10
    assert total_loss((1.0, 2.0, 3.0, 4.0), (0, 0, 0, 1)) == 4
    assert total_loss(LossBreakdown(1.0, 2.0, 3.0, 4.0)) == 10


def test_total_loss_rejects_wrong_arity():
    with pytest.raises(ValueError):
        total_loss((1.0, 2.0, 3.0))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=4, max_size=4), st.integers(0, 3), st.floats(0, 5))
def test_total_loss_linear_in_each_part(parts, idx, delta):
    weights = (0.5, 1.0, 2.0, 1.5)
    bumped = list(parts)
    bumped[idx] += delta
    assert total_loss(bumped, weights) - total_loss(parts, weights) == pytest.approx(weights[idx] * delta, abs=1e-9)


def test_breakdown_serializes():
    assert LossBreakdown(1.0, 2.0, 3.0, 4.0, 10.0).to_dict() == {
        "multi_class": 1.0,
        "er": 2.0,
        "ecr": 3.0,
        "cross_entropy": 4.0,
        "total": 10.0,
    }
