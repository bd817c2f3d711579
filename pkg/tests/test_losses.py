"""Tests for the Dice, BCE, and combined losses and their gradients."""

import math

import numpy as np
import pytest

from fedseg.losses import (
    DICE_SMOOTH,
    PROB_EPS,
    MaskPair,
    bce_loss,
    dice_bce_grad,
    dice_bce_loss,
    dice_loss,
)


def finite_difference_grad(truth, pred, h=1e-7):
    """Central-difference gradient of the combined loss w.r.t. each prediction."""
    grad = np.zeros_like(pred)
    for i in range(len(pred)):
        hi = pred.copy()
        lo = pred.copy()
        hi[i] += h
        lo[i] -= h
        grad[i] = (dice_bce_loss(MaskPair(truth, hi)) - dice_bce_loss(MaskPair(truth, lo))) / (
            2 * h
        )
    return grad


class TestMaskPair:
    def test_clamps_predictions(self):
        pair = MaskPair(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        assert pair.pred[0] == PROB_EPS
        assert pair.pred[1] == 1.0 - PROB_EPS

    def test_rejects_non_binary_truth(self):
        with pytest.raises(ValueError):
            MaskPair(np.array([0.5]), np.array([0.5]))

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            MaskPair(np.array([1.0]), np.array([0.5, 0.5]))

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            MaskPair(np.array([]), np.array([]))


class TestDiceLoss:
    def test_near_perfect(self):
        delta = 1e-6
        pair = MaskPair(np.array([1.0, 1.0]), np.array([1 - delta, 1 - delta]))
        assert dice_loss(pair) <= 2 * delta

    def test_total_mismatch(self):
        pair = MaskPair(np.array([1.0, 0.0]), np.array([1e-7, 1 - 1e-7]))
        assert dice_loss(pair) == pytest.approx(1.0, abs=1e-5)

    def test_half_overlap(self):
        # Direct evaluation: numerator 2*0.5, denominator 1 + (0.5+0.5+2e-7).
        delta = 1e-7
        pair = MaskPair(np.array([1.0, 0, 0, 0]), np.array([0.5, 0.5, delta, delta]))
        expected = 1 - (2 * 0.5 + DICE_SMOOTH) / (1 + 1 + 2 * delta + DICE_SMOOTH)
        assert dice_loss(pair) == pytest.approx(expected, abs=1e-12)
        assert dice_loss(pair) == pytest.approx(0.5, abs=1e-5)

    def test_range(self):
        rng = np.random.default_rng(23)
        for _ in range(100):
            n = int(rng.integers(1, 40))
            pair = MaskPair(rng.integers(0, 2, n).astype(float), rng.uniform(0, 1, n))
            assert 0.0 <= dice_loss(pair) <= 1.0

    def test_padding_invariance(self):
        # Matched (truth 0, prediction ~0) padding barely moves the loss.
        truth = np.array([1.0, 0.0, 1.0])
        pred = np.array([0.8, 0.3, 0.6])
        base = dice_loss(MaskPair(truth, pred))
        padded = dice_loss(
            MaskPair(np.concatenate([truth, [0, 0]]), np.concatenate([pred, [1e-7, 1e-7]]))
        )
        assert padded == pytest.approx(base, abs=1e-6)


class TestBceLoss:
    def test_uncertain_positive(self):
        assert bce_loss(MaskPair(np.array([1.0]), np.array([0.5]))) == pytest.approx(
            math.log(2), abs=1e-12
        )

    def test_uncertain_negative_symmetry(self):
        assert bce_loss(MaskPair(np.array([0.0]), np.array([0.5]))) == pytest.approx(
            math.log(2), abs=1e-12
        )

    def test_perfect_prediction_floor(self):
        pair = MaskPair(np.array([1.0, 0.0]), np.array([1 - PROB_EPS, PROB_EPS]))
        assert 0 <= bce_loss(pair) < 1e-6

    def test_non_negative(self):
        rng = np.random.default_rng(29)
        for _ in range(100):
            n = int(rng.integers(1, 40))
            pair = MaskPair(rng.integers(0, 2, n).astype(float), rng.uniform(0, 1, n))
            assert bce_loss(pair) >= 0.0


class TestCombinedLoss:
    def test_sum_property_exact(self):
        rng = np.random.default_rng(31)
        for _ in range(20):
            n = int(rng.integers(1, 30))
            pair = MaskPair(rng.integers(0, 2, n).astype(float), rng.uniform(0, 1, n))
            assert dice_bce_loss(pair) == dice_loss(pair) + bce_loss(pair)

    def test_perfect_prediction_minimum(self):
        truth = np.array([1.0, 0, 1, 0, 0])
        pair = MaskPair(truth, truth.copy())
        assert dice_bce_loss(pair) < 1e-5
        assert np.all(np.isfinite(dice_bce_grad(pair)))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(37)
        truth = rng.integers(0, 2, 12).astype(float)
        pred = rng.uniform(0.1, 0.9, 12)
        perm = rng.permutation(12)
        assert dice_bce_loss(MaskPair(truth, pred)) == pytest.approx(
            dice_bce_loss(MaskPair(truth[perm], pred[perm])), abs=1e-14
        )


class TestGradient:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(41)
        for _ in range(6):
            truth = rng.integers(0, 2, 6).astype(float)
            pred = rng.uniform(0.15, 0.85, 6)
            analytic = dice_bce_grad(MaskPair(truth, pred))
            numeric = finite_difference_grad(truth, pred)
            rel = np.abs(analytic - numeric) / np.maximum(np.abs(analytic), 1e-12)
            assert rel.max() < 1e-6

    def test_gradient_descends(self):
        rng = np.random.default_rng(43)
        truth = rng.integers(0, 2, 10).astype(float)
        pred = rng.uniform(0.2, 0.8, 10)
        grad = dice_bce_grad(MaskPair(truth, pred))
        stepped = np.clip(pred - 1e-3 * grad, 1e-6, 1 - 1e-6)
        assert dice_bce_loss(MaskPair(truth, stepped)) < dice_bce_loss(MaskPair(truth, pred))
