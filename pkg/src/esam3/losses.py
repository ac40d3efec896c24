"""Training objectives: Dice, focal, feature MSE, score BCE and their weighted total."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import tensor as T
from .numerics.tensor import NumericalError, ShapeError, Tensor


@dataclass(frozen=True)
class LossWeights:
    """Weights of the distillation terms and focal/Dice hyper-parameters.

    Defaults are the common focal-loss settings and a unit Dice smoothing term.
    """

    lambda1: float = 1.0  # feature distillation
    lambda2: float = 1.0  # mask distillation
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    dice_eps: float = 1.0

    def __post_init__(self) -> None:
        vals = asdict(self)
        if not all(math.isfinite(v) for v in vals.values()):
            raise ValueError(f"loss weights must be finite: {vals}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1/lambda2 must be non-negative")
        if not 0.0 < self.focal_alpha < 1.0:
            raise ValueError("focal_alpha must lie in (0, 1)")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be non-negative")
        if self.dice_eps <= 0:
            raise ValueError("dice_eps must be positive")


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def _check_binary(op: str, t: Tensor) -> None:
    if not np.all((t.data == 0.0) | (t.data == 1.0)):
        raise ValueError(f"{op}: target entries must be 0 or 1")


def dice_loss(pred_probs, target, eps: float = 1.0) -> Tensor:
    """1 - (2 sum(p t) + eps) / (sum p + sum t + eps)."""
    p, t = T.tensor(pred_probs), T.tensor(target)
    _same_shape("dice_loss", p, t)
    _check_binary("dice_loss", t)
    inter = T.sum(p * t)
    return 1.0 - (2.0 * inter + eps) / (T.sum(p) + float(t.data.sum()) + eps)


def focal_loss(pred_logits, target, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean over pixels of -alpha_t (1 - p_t)^gamma log p_t.

    With s = 2t - 1, log p_t = log_sigmoid(s x) and 1 - p_t = sigmoid(-s x), so
    the modulating factor is exp(gamma * log_sigmoid(-s x)); no probability is
    ever formed explicitly.
    """
    x, t = T.tensor(pred_logits), T.tensor(target)
    _same_shape("focal_loss", x, t)
    if not np.all(np.isfinite(x.data)):
        raise NumericalError("focal_loss: non-finite logits")
    _check_binary("focal_loss", t)
    sign = 2.0 * t.data - 1.0
    alpha_t = np.where(t.data == 1.0, alpha, 1.0 - alpha)
    sx = x * sign
    log_pt = T.log_sigmoid(sx)
    if gamma == 0.0:
        per_pixel = log_pt * (-alpha_t)
    else:
        modulation = T.exp(T.log_sigmoid(-sx) * gamma)
        per_pixel = modulation * log_pt * (-alpha_t)
    return T.mean(per_pixel)


def feature_mse(student_proj, teacher_feat) -> Tensor:
    s, t = T.tensor(student_proj), T.tensor(teacher_feat)
    _same_shape("feature_mse", s, t)
    d = s - t
    return T.mean(d * d)


def score_bce(pred_score_logit, target) -> Tensor:
    """Binary cross-entropy on logits, mean-reduced."""
    x = T.tensor(pred_score_logit)
    t = T.tensor(target)
    if t.shape != x.shape:
        if t.size == x.size:
            t = Tensor(t.data.reshape(x.shape))
        else:
            raise ShapeError("score_bce", x.shape, t.shape)
    _check_binary("score_bce", t)
    sign = 2.0 * t.data - 1.0
    return -T.mean(T.log_sigmoid(x * sign))


def mask_terms(logits, target, w: LossWeights) -> Tensor:
    """Dice + focal for one mask given logits."""
    return dice_loss(T.sigmoid(logits), target, w.dice_eps) + focal_loss(logits, target, w.focal_alpha, w.focal_gamma)


def total_loss(task, feat, mask, w: LossWeights):
    """task + lambda1 * feat + lambda2 * mask (tensors or floats)."""
    for name, v in (("task", task), ("feat", feat), ("mask", mask)):
        val = v.data if isinstance(v, Tensor) else np.asarray(v)
        if not np.all(np.isfinite(val)):
            raise NumericalError(f"total_loss: non-finite {name} term")
    return task + w.lambda1 * feat + w.lambda2 * mask
