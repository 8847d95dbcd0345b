import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from autoprompt_sdg.losses import (
    InvalidInputError,
    bce_loss,
    combined_loss,
    combined_loss_from_logits,
    dice_loss,
    dice_score,
)

from oracles import central_difference, relative_error


def test_dice_identity_disjoint_half():
    a = np.zeros((4, 4), np.uint8)
    a[0, :] = 1
    assert dice_score(a, a) == 1.0
    b = np.zeros((4, 4), np.uint8)
    b[3, :] = 1
    assert dice_score(a, b) == 0.0
    c = np.zeros((4, 4), np.uint8)
    c[0, :2] = 1
    c[1, :2] = 1  # |P| = 4, |G| = 4, overlap 2
    assert dice_score(c, a) == 0.5


def test_dice_empty_conventions():
    z = np.zeros((3, 3))
    one = np.eye(3)
    assert dice_score(z, z) == 1.0
    assert dice_score(z, one) == 0.0


def test_dice_shape_mismatch():
    with pytest.raises(InvalidInputError):
        dice_score(np.zeros((2, 2)), np.zeros((2, 3)))


masks = arrays(np.uint8, (6, 6), elements=st.integers(0, 1))


@settings(max_examples=100, deadline=None)
@given(a=masks, b=masks)
def test_dice_symmetric_and_bounded(a, b):
    d = dice_score(a, b)
    assert d == dice_score(b, a)
    assert 0.0 <= d <= 1.0


def test_dice_loss_limits():
    gt = torch.zeros(1, 1, 8, 8)
    gt[..., 2:6, 2:6] = 1
    assert dice_loss(gt.clone(), gt, smooth=1e-8).item() == pytest.approx(0.0, abs=1e-7)
    assert dice_loss(1 - gt, gt, smooth=1e-8).item() == pytest.approx(1.0, abs=1e-7)


def test_dice_loss_gradient_finite_differences():
    rng = np.random.default_rng(0)
    p0 = rng.uniform(0.05, 0.95, (4, 4))
    gt = torch.from_numpy((rng.random((4, 4)) > 0.5).astype(np.float64))

    def fn(arr):
        return float(dice_loss(torch.from_numpy(arr), gt, 1.0))

    p = torch.from_numpy(p0.copy()).requires_grad_(True)
    dice_loss(p, gt, 1.0).backward()
    assert relative_error(p.grad.numpy(), central_difference(fn, p0, h=1e-6)) < 1e-5


def test_bce_half_is_ln2():
    gt = torch.from_numpy((np.random.default_rng(1).random((5, 5)) > 0.5).astype(np.float32))
    assert bce_loss(torch.full((5, 5), 0.5), gt).item() == pytest.approx(math.log(2), rel=1e-6)


def test_bce_clamps_saturated_probs():
    gt = torch.tensor([1.0, 0.0])
    assert math.isfinite(bce_loss(torch.tensor([0.0, 1.0]), gt).item())


def test_combined_weights_project():
    rng = np.random.default_rng(2)
    probs = torch.from_numpy(rng.uniform(0.01, 0.99, (2, 1, 6, 6)))
    gt = torch.from_numpy((rng.random((2, 1, 6, 6)) > 0.5).astype(np.float64))
    ce_only = combined_loss(probs, gt, 1.0, 0.0)
    dice_only = combined_loss(probs, gt, 0.0, 1.0)
    assert ce_only.total.item() == ce_only.ce_part.item()
    assert dice_only.total.item() == dice_only.dice_part.item()
    mixed = combined_loss(probs, gt, 2.0, 3.0)
    assert mixed.total.item() == pytest.approx(2 * ce_only.ce_part.item() + 3 * dice_only.dice_part.item())


def test_logit_form_agrees_with_probability_form():
    logits = torch.randn(2, 1, 8, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    gt = (torch.rand(2, 1, 8, 8, generator=torch.Generator().manual_seed(1)) > 0.5).double()
    a = combined_loss(torch.sigmoid(logits), gt)
    b = combined_loss_from_logits(logits, gt)
    assert a.total.item() == pytest.approx(b.total.item(), rel=1e-9)


def test_perfect_prediction_beats_background():
    gt = torch.zeros(1, 1, 16, 16)
    gt[..., 4:10, 5:12] = 1
    perfect = combined_loss_from_logits(gt * 20 - 10, gt).total.item()
    background = combined_loss_from_logits(torch.full_like(gt, -10.0), gt).total.item()
    assert perfect < background


@settings(max_examples=50, deadline=None)
@given(
    probs=arrays(np.float64, (3, 3), elements=st.floats(0.0, 1.0)),
    gt=arrays(np.uint8, (3, 3), elements=st.integers(0, 1)),
    w=st.tuples(st.floats(0, 5), st.floats(0, 5)),
)
def test_losses_non_negative_and_linear(probs, gt, w):
    p = torch.from_numpy(probs)
    g = torch.from_numpy(gt)
    lv = combined_loss(p, g, *w)
    assert lv.ce_part.item() >= 0
    assert 0.0 <= lv.dice_part.item() <= 1.0
    assert lv.total.item() == pytest.approx(w[0] * lv.ce_part.item() + w[1] * lv.dice_part.item(), abs=1e-9)
