import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from seam_mil import mil as mil_ops
from seam_mil.equivariance import AffineSpec, apply_affine
from seam_mil.errors import DimensionError


def _rand(*shape, seed=0):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


# ----------------------------------------------------------------------------- build_instance_bag


def test_selector_fuse_returns_original_features():
    f = _rand(3, 4, 4)
    fuse = torch.cat([torch.eye(3), torch.zeros(3, 3)], dim=1).double()
    bag = mil_ops.build_instance_bag(f, f.clone(), AffineSpec.identity(), fuse)
    assert torch.allclose(bag, f)


def test_bag_shape_contract():
    f = torch.zeros(8, 16, 16)
    bag = mil_ops.build_instance_bag(f, f, AffineSpec.identity(), torch.zeros(32, 16))
    assert bag.shape == (32, 16, 16)


def test_rescaled_bag_matches_resize_then_per_cell_projection():
    f_o = _rand(8, 20, 20, seed=1)
    spec = AffineSpec.rescale(0.4)
    f_a = apply_affine(_rand(8, 20, 20, seed=2), spec)  # 8 x 8 x 8
    fuse = _rand(5, 16, seed=3) - 0.5
    bag = mil_ops.build_instance_bag(f_o, f_a, spec, fuse)
    aligned = F.interpolate(f_a[None], size=(20, 20), mode="bilinear", align_corners=False)[0]
    for y in range(0, 20, 3):
        for x in range(0, 20, 3):
            stacked = torch.cat([f_o[:, y, x], aligned[:, y, x]])
            assert torch.allclose(bag[:, y, x], fuse @ stacked, atol=1e-5)


def test_bag_channel_mismatch():
    f = torch.zeros(4, 2, 2)
    with pytest.raises(DimensionError):
        mil_ops.build_instance_bag(f, f, AffineSpec.identity(), torch.zeros(3, 7))


def test_flip_branch_is_unflipped_before_fusion():
    f = _rand(2, 3, 3, seed=4)
    spec = AffineSpec("hflip")
    fuse = torch.cat([torch.zeros(2, 2), torch.eye(2)], dim=1).double()  # select the affine branch
    bag = mil_ops.build_instance_bag(f, apply_affine(f, spec), spec, fuse)
    assert torch.equal(bag, f)


# ----------------------------------------------------------------------------- attention_weights


def test_zero_w1_gives_half_everywhere():
    bag = _rand(4, 3, 3)
    a = mil_ops.attention_weights(bag, torch.zeros(2, dtype=bag.dtype), _rand(2, 4, seed=1))
    assert torch.equal(a, torch.full((9,), 0.5, dtype=bag.dtype))


@pytest.mark.parametrize("value,expected", [(-5.0, 0.5), (2.0, 1 / (1 + math.exp(-2)))])
def test_scalar_attention(value, expected):
    bag = torch.full((1, 1, 1), value)
    a = mil_ops.attention_weights(bag, torch.ones(1), torch.ones(1, 1))
    assert a.item() == pytest.approx(expected, abs=1e-6)


def test_attention_matches_per_instance_formula():
    bag, w1, w2 = _rand(3, 2, 2, seed=5) - 0.5, _rand(4, seed=6) - 0.5, _rand(4, 3, seed=7) - 0.5
    a = mil_ops.attention_weights(bag, w1, w2)
    cols = bag.flatten(1)
    for i in range(4):
        hidden = torch.clamp(w2 @ cols[:, i], min=0)
        assert a[i].item() == pytest.approx(1 / (1 + math.exp(-(w1 @ hidden).item())), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_attention_bounded_and_permutation_equivariant(seed):
    bag = (_rand(3, 1, 6, seed=seed) - 0.5) * 4
    w1, w2 = _rand(2, seed=seed + 1) - 0.5, _rand(2, 3, seed=seed + 2) - 0.5
    a = mil_ops.attention_weights(bag, w1, w2)
    assert torch.all((a > 0) & (a < 1))
    perm = torch.randperm(6, generator=torch.Generator().manual_seed(seed))
    a_perm = mil_ops.attention_weights(bag[..., perm], w1, w2)
    assert torch.allclose(a_perm, a[perm])
    w, b = _rand(2, 3, seed=seed + 3), _rand(2, seed=seed + 4)
    p = mil_ops.mil_classify(mil_ops.apply_attention(bag, a), w, b)
    p_perm = mil_ops.mil_classify(mil_ops.apply_attention(bag[..., perm], a_perm), w, b)
    assert torch.allclose(p, p_perm)


def test_attention_monotone_for_positive_scalar_weights():
    values = torch.linspace(-3, 3, 25, dtype=torch.float64).reshape(1, 1, 25)
    a = mil_ops.attention_weights(values, torch.tensor([0.7], dtype=torch.float64), torch.tensor([[1.3]], dtype=torch.float64))
    assert torch.all(a[1:] >= a[:-1])


# ----------------------------------------------------------------------------- apply_attention


def test_uniform_half_attention_scales_bag():
    bag = _rand(3, 2, 2)
    assert torch.allclose(mil_ops.apply_attention(bag, torch.full((4,), 0.5, dtype=bag.dtype)), bag * 0.5)


def test_single_instance_product():
    out = mil_ops.apply_attention(torch.full((1, 1, 1), 8.0), torch.tensor([0.25]))
    assert out.item() == 2.0


def test_attention_gating_matches_double_loop():
    bag, a = _rand(3, 2, 2, seed=8), _rand(4, seed=9)
    out = mil_ops.apply_attention(bag, a)
    flat = bag.flatten(1)
    for k in range(3):
        for i in range(4):
            assert out.flatten(1)[k, i].item() == pytest.approx(flat[k, i].item() * a[i].item(), abs=1e-7)


def test_attention_length_mismatch():
    with pytest.raises(DimensionError):
        mil_ops.apply_attention(torch.zeros(2, 2, 2), torch.zeros(3))


# ----------------------------------------------------------------------------- mil_classify


def test_zero_classifier_is_uniform():
    p = mil_ops.mil_classify(_rand(4, 2, 2), torch.zeros(2, 4, dtype=torch.float64), torch.zeros(2, dtype=torch.float64))
    assert p.tolist() == [0.5, 0.5]


def test_saturated_bias():
    p = mil_ops.mil_classify(_rand(4, 2, 2), torch.zeros(2, 4, dtype=torch.float64), torch.tensor([10.0, -10.0], dtype=torch.float64))
    assert p[0].item() == pytest.approx(1.0, abs=1e-8)
    assert p[1].item() == pytest.approx(1 / (1 + math.exp(20)), rel=1e-6)  # 2.06e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_probabilities_sum_to_one(seed):
    gated = (_rand(2, 5, 3, 3, seed=seed) - 0.5) * 20
    p = mil_ops.mil_classify(gated, _rand(2, 5, seed=seed + 1) * 4, _rand(2, seed=seed + 2))
    assert torch.allclose(p.sum(-1), torch.ones(2, dtype=p.dtype), atol=1e-6)
    assert torch.all((p > 0) & (p < 1))


def test_classifier_mean_pools_instances():
    gated, w, b = _rand(3, 2, 2, seed=11), _rand(2, 3, seed=12), _rand(2, seed=13)
    pooled = gated.flatten(1).mean(1)
    assert torch.allclose(mil_ops.mil_logits(gated, w, b), w @ pooled + b)
