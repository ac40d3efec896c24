import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esam3.losses import LossWeights, dice_loss, feature_mse, focal_loss, score_bce, total_loss
from esam3.numerics import NumericalError, ShapeError, Tensor, grad_check
from esam3.numerics import tensor as T


def _bce(x, t):
    p = 1 / (1 + np.exp(-x))
    return float(np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p))))


def test_dice_examples():
    t = np.array([1.0, 1.0, 0.0, 0.0])
    assert dice_loss(Tensor(t), t, eps=1.0).item() <= 1.0
    assert abs(dice_loss(Tensor(t), t, eps=1.0).item()) < 1e-12
    assert dice_loss(Tensor(1 - t), t, eps=1e-12).item() == pytest.approx(1.0)
    assert dice_loss(Tensor(np.full(4, 0.5)), t, eps=1e-12).item() == pytest.approx(0.5, abs=1e-9)


def test_dice_rejects_bad_inputs():
    with pytest.raises(ShapeError):
        dice_loss(Tensor(np.ones(3)), np.ones(4))
    with pytest.raises(ValueError):
        dice_loss(Tensor(np.ones(2)), np.array([0.5, 1.0]))


def test_focal_closed_form_and_limits():
    assert focal_loss(Tensor([0.0]), np.array([1.0]), 0.25, 2.0).item() == pytest.approx(0.25 * 0.25 * math.log(2), rel=1e-12)
    vals = [focal_loss(Tensor([s, -s]), np.array([1.0, 0.0])).item() for s in (1.0, 4.0, 16.0, 64.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-20
    with pytest.raises(NumericalError):
        focal_loss(Tensor([np.inf]), np.array([1.0]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_focal_gamma0_is_half_bce(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(20) * 3
    t = (rng.random(20) < 0.5).astype(float)
    assert abs(focal_loss(Tensor(x), t, alpha=0.5, gamma=0.0).item() - 0.5 * _bce(x, t)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_losses_nonnegative_and_dice_bounded(seed):
    rng = np.random.default_rng(seed)
    p = rng.random((4, 4))
    t = (rng.random((4, 4)) < 0.4).astype(float)
    d = dice_loss(Tensor(p), t).item()
    assert 0.0 <= d <= 1.0
    assert focal_loss(Tensor(rng.standard_normal((4, 4))), t).item() >= 0.0


def test_feature_mse():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 5))
    b = rng.standard_normal((3, 5))
    assert feature_mse(Tensor(a), a).item() == 0.0
    assert feature_mse(Tensor(a), a + 1).item() == pytest.approx(1.0)
    assert feature_mse(Tensor(a), b).item() == pytest.approx(np.sum((a - b) ** 2) / a.size, rel=1e-13)
    with pytest.raises(ShapeError):
        feature_mse(Tensor(a), b.T)


def test_score_bce_examples():
    assert score_bce(Tensor([0.0]), np.array([1.0])).item() == pytest.approx(math.log(2))
    assert score_bce(Tensor([0.0]), np.array([0.0])).item() == pytest.approx(math.log(2))
    assert score_bce(Tensor([2.0, -2.0]), np.array([1.0, 0.0])).item() == pytest.approx(math.log1p(math.exp(-2)))
    with pytest.raises(ValueError):
        score_bce(Tensor([0.0]), np.array([0.3]))


def test_total_loss_arithmetic_and_linearity():
    assert total_loss(1.0, 2.0, 3.0, LossWeights(lambda1=0, lambda2=0)) == 1.0
    assert total_loss(1.0, 2.0, 3.0, LossWeights()) == 6.0
    assert total_loss(1.0, 2.0, 3.0, LossWeights(lambda1=0.5, lambda2=2.0)) == 8.0
    w = LossWeights(lambda1=0.3, lambda2=1.7)
    base = total_loss(1.0, 2.0, 3.0, w)
    assert total_loss(2.0, 2.0, 3.0, w) - base == pytest.approx(1.0)
    assert total_loss(1.0, 3.0, 3.0, w) - base == pytest.approx(0.3)
    assert total_loss(1.0, 2.0, 4.0, w) - base == pytest.approx(1.7)
    with pytest.raises(NumericalError):
        total_loss(1.0, float("nan"), 0.0, w)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(dice_eps=0.0)
    with pytest.raises(ValueError):
        LossWeights(focal_alpha=1.0)
    with pytest.raises(ValueError):
        LossWeights(lambda1=-1.0)


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    t = (rng.random((3, 4)) < 0.5).astype(float)
    x = Tensor(rng.standard_normal((3, 4)))
    w = LossWeights()
    assert grad_check(lambda z: dice_loss(T.sigmoid(z), t), x) < 1e-5
    assert grad_check(lambda z: focal_loss(z, t), x) < 1e-5
    assert grad_check(lambda z: feature_mse(z, t), x) < 1e-5
    assert grad_check(lambda z: score_bce(z, t), x) < 1e-5
    assert grad_check(lambda z: total_loss(focal_loss(z, t), feature_mse(z, t), dice_loss(T.sigmoid(z), t), w), x) < 1e-5
