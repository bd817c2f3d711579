"""Soft-overlap (Dice) loss, binary cross-entropy, and their sum.

The combined loss is what local trainers minimize and what the federation
engine evaluates on validation splits. Gradients with respect to the
predicted probabilities are exact closed forms, so the trainer can
backpropagate without an autograd dependency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_EPS = 1e-7  # predictions are clamped to [PROB_EPS, 1 - PROB_EPS] before logs
DICE_SMOOTH = 1e-6  # added to numerator and denominator so empty masks stay defined


def clamp_probabilities(pred: np.ndarray) -> np.ndarray:
    """Clamp predicted probabilities strictly inside (0, 1)."""
    return np.clip(pred, PROB_EPS, 1.0 - PROB_EPS)


@dataclass(frozen=True, eq=False)
class MaskPair:
    """A binary truth mask and a predicted probability mask of equal length.

    Predictions are clamped into ``[PROB_EPS, 1 - PROB_EPS]`` at construction,
    so the log terms of the cross-entropy are always defined.
    """

    truth: np.ndarray
    pred: np.ndarray

    def __post_init__(self):
        truth = np.asarray(self.truth, dtype=np.float64).ravel()
        pred = np.asarray(self.pred, dtype=np.float64).ravel()
        if truth.size < 1:
            raise ValueError("masks must contain at least one element")
        if truth.shape != pred.shape:
            raise ValueError("truth and prediction masks differ in length")
        if not np.all((truth == 0.0) | (truth == 1.0)):
            raise ValueError("truth mask must be strictly binary")
        if not np.all(np.isfinite(pred)):
            raise ValueError("prediction mask contains non-finite values")
        pred = clamp_probabilities(pred)
        truth = truth.copy()
        truth.flags.writeable = False
        pred.flags.writeable = False
        object.__setattr__(self, "truth", truth)
        object.__setattr__(self, "pred", pred)

    def __len__(self) -> int:
        return int(self.truth.shape[0])


def batch_dice_bce(truth: np.ndarray, pred: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample Dice and BCE terms for row-wise ``(B, N)`` arrays.

    ``pred`` must already be clamped inside (0, 1). Returns two length-B
    vectors; the combined loss of a sample is their sum.
    """
    truth_sum = truth.sum(axis=1)
    pred_sum = pred.sum(axis=1)
    overlap = (truth * pred).sum(axis=1)
    numer = 2.0 * overlap + DICE_SMOOTH
    denom = truth_sum + pred_sum + DICE_SMOOTH
    dice = 1.0 - numer / denom
    bce = -np.mean(truth * np.log(pred) + (1.0 - truth) * np.log(1.0 - pred), axis=1)
    return dice, bce


def batch_dice_bce_grad(truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """Gradient of the per-sample combined loss w.r.t. each prediction.

    Row ``b`` holds d(dice_b + bce_b) / d pred[b, :]. The Dice part follows
    the quotient rule over the per-sample sums; the BCE part is
    ``(pred - truth) / (N * pred * (1 - pred))``.
    """
    n = truth.shape[1]
    truth_sum = truth.sum(axis=1, keepdims=True)
    pred_sum = pred.sum(axis=1, keepdims=True)
    overlap = (truth * pred).sum(axis=1, keepdims=True)
    numer = 2.0 * overlap + DICE_SMOOTH
    denom = truth_sum + pred_sum + DICE_SMOOTH
    d_dice = -(2.0 * truth * denom - numer) / (denom * denom)
    d_bce = (pred - truth) / (n * pred * (1.0 - pred))
    return d_dice + d_bce


def dice_loss(pair: MaskPair) -> float:
    """Soft Dice loss: one minus twice the overlap over the sum of masses."""
    dice, _ = batch_dice_bce(pair.truth[None, :], pair.pred[None, :])
    return float(dice[0])


def bce_loss(pair: MaskPair) -> float:
    """Mean binary cross-entropy over the mask."""
    _, bce = batch_dice_bce(pair.truth[None, :], pair.pred[None, :])
    return float(bce[0])


def dice_bce_loss(pair: MaskPair) -> float:
    """Sum of the Dice and BCE terms."""
    dice, bce = batch_dice_bce(pair.truth[None, :], pair.pred[None, :])
    return float(dice[0] + bce[0])


def dice_bce_grad(pair: MaskPair) -> np.ndarray:
    """Exact gradient of :func:`dice_bce_loss` w.r.t. the predictions."""
    return batch_dice_bce_grad(pair.truth[None, :], pair.pred[None, :])[0]
