"""Training losses and the evaluation metric for binary segmentation.

Three pieces: a smooth dice loss for supervised training, a per-pixel
Bernoulli KL term for matching a reference (teacher) model's output
distribution, and their convex blend. `dice_score` is the non-smooth,
non-differentiable overlap metric used for evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError

DICE_SMOOTH = 1e-6


@dataclass
class LossValue:
    """Differentiable scalar loss plus optional per-term breakdown."""

    value: Tensor
    components: dict = field(default_factory=dict)

    def item(self):
        return float(self.value.data)


def _check_binary(arr, what):
    if not np.all((arr == 0.0) | (arr == 1.0)):
        raise ContractError(f"{what} must be binary (0/1 values only)")


def dice_loss(probs, target, smooth=DICE_SMOOTH):
    """Soft dice loss, averaged over the batch.

    Per sample: 1 - (2*sum(p*t) + smooth) / (sum(p) + sum(t) + smooth),
    with p the predicted foreground probabilities and t the binary mask.
    Differentiable w.r.t. `probs`. Probabilities may touch 0/1 exactly
    (float32 sigmoid saturates); values outside [0, 1] are a contract
    violation.
    """
    if probs.shape != target.shape:
        raise ShapeError(f"dice_loss: shapes {probs.shape} vs {target.shape}")
    if np.min(probs.data) < 0.0 or np.max(probs.data) > 1.0:
        raise ContractError("dice_loss probabilities must lie in [0, 1]")
    _check_binary(target.data, "dice_loss target")
    axes = tuple(range(1, len(probs.shape)))
    inter = ad.tensor_sum(ad.mul(probs, target), axis=axes)
    denom = ad.add(ad.tensor_sum(probs, axis=axes), ad.tensor_sum(target, axis=axes))
    dice = ad.div(ad.add(ad.mul(inter, 2.0), smooth), ad.add(denom, smooth))
    value = ad.sub(1.0, ad.mean(dice))
    return LossValue(value)


def kl_distill(teacher_logits, student_logits, temperature=1.0):
    """Mean per-pixel Bernoulli KL(sigmoid(teacher) || sigmoid(student)).

    The teacher side is treated as a constant: no gradient ever flows
    into it. Both log-probabilities are evaluated through softplus so
    extreme logits stay finite. Always >= 0, and exactly 0 when the two
    logit maps agree.
    """
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError(
            f"kl_distill: shapes {teacher_logits.shape} vs {student_logits.shape}"
        )
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    # Same scaling expression as the student side so identical logit maps
    # produce bit-identical terms (and thus an exact zero KL).
    t = teacher_logits.data * (1.0 / temperature)
    p_t = ad._sigmoid_np(t)
    # log p_t = -softplus(-t), log(1-p_t) = -softplus(t); constants.
    log_pt = -ad._softplus_np(-t)
    log_qt = -ad._softplus_np(t)

    s = ad.mul(student_logits, 1.0 / temperature)
    # KL = p_t*(log p_t - log p_s) + (1-p_t)*(log(1-p_t) - log(1-p_s))
    pos = ad.mul(Tensor(p_t), ad.add(ad.softplus(ad.neg(s)), Tensor(log_pt)))
    neg = ad.mul(Tensor(1.0 - p_t), ad.add(ad.softplus(s), Tensor(log_qt)))
    value = ad.mean(ad.add(pos, neg))
    return LossValue(value)


def combined_loss(distill, segment, alpha):
    """alpha * distill + (1 - alpha) * segment, components recorded."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    value = ad.add(
        ad.mul(distill.value, float(alpha)),
        ad.mul(segment.value, float(1.0 - alpha)),
    )
    return LossValue(
        value,
        components={"distill": distill.item(), "segment": segment.item()},
    )


def dice_score(pred_mask, gt_mask):
    """Hard overlap 2|P∩G| / (|P|+|G|); two empty masks score 1.0."""
    pred = pred_mask.data if isinstance(pred_mask, Tensor) else np.asarray(pred_mask)
    gt = gt_mask.data if isinstance(gt_mask, Tensor) else np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ShapeError(f"dice_score: shapes {pred.shape} vs {gt.shape}")
    _check_binary(pred, "dice_score prediction")
    _check_binary(gt, "dice_score ground truth")
    p = float(pred.sum())
    g = float(gt.sum())
    if p + g == 0.0:
        return 1.0
    inter = float((pred * gt).sum())
    return 2.0 * inter / (p + g)
