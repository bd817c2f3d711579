"""Tests for the dense reference trainer: forward, gradients, AdamW, training."""

import numpy as np
import pytest

from fedseg.params import ParamVector
from fedseg.trainer import (
    OptimizerState,
    TrainerArchitecture,
    adamw_step,
    forward,
    init_params,
    loss_and_grad,
    train_local,
)

SMALL = TrainerArchitecture(input_voxels=8, hidden_units=4)


def random_batch(rng, arch, size):
    volumes = rng.uniform(0.0, 1.0, (size, arch.input_voxels))
    masks = rng.integers(0, 2, (size, arch.input_voxels)).astype(float)
    return list(zip(volumes, masks))


def finite_difference_param_grad(arch, params, batch, h=1e-6):
    grad = np.zeros(arch.param_count)
    base = params.values
    for i in range(arch.param_count):
        hi = base.copy()
        lo = base.copy()
        hi[i] += h
        lo[i] -= h
        loss_hi, _ = loss_and_grad(arch, ParamVector(hi, arch.layout_id), batch)
        loss_lo, _ = loss_and_grad(arch, ParamVector(lo, arch.layout_id), batch)
        grad[i] = (loss_hi - loss_lo) / (2 * h)
    return grad


class TestArchitecture:
    def test_param_count(self):
        v, h = 8, 4
        assert SMALL.param_count == v * h + h + h * v + v

    def test_layout_id_deterministic(self):
        assert SMALL.layout_id == TrainerArchitecture(8, 4).layout_id
        assert SMALL.layout_id != TrainerArchitecture(8, 5).layout_id

    def test_pack_unpack_roundtrip(self):
        rng = np.random.default_rng(0)
        flat = rng.normal(size=SMALL.param_count)
        assert np.array_equal(SMALL.pack(*SMALL.unpack(flat)), flat)

    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            TrainerArchitecture(0, 4)


class TestForward:
    def test_zero_params_give_half(self):
        params = ParamVector(np.zeros(SMALL.param_count), SMALL.layout_id)
        out = forward(SMALL, params, np.linspace(0, 1, 8))
        assert np.array_equal(out, np.full(8, 0.5))

    def test_output_bounds(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            params = init_params(SMALL, rng)
            out = forward(SMALL, params, rng.uniform(0, 1, 8))
            assert np.all(out > 0.0) and np.all(out < 1.0)

    def test_purity(self):
        rng = np.random.default_rng(2)
        params = init_params(SMALL, rng)
        volume = rng.uniform(0, 1, 8)
        assert np.array_equal(forward(SMALL, params, volume), forward(SMALL, params, volume))

    def test_layout_mismatch(self):
        params = ParamVector(np.zeros(SMALL.param_count), "other-layout")
        with pytest.raises(ValueError):
            forward(SMALL, params, np.zeros(8))

    def test_wrong_volume_size(self):
        params = ParamVector(np.zeros(SMALL.param_count), SMALL.layout_id)
        with pytest.raises(ValueError):
            forward(SMALL, params, np.zeros(9))


class TestLossAndGrad:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(101)
        for _ in range(3):
            params = init_params(SMALL, rng)
            batch = random_batch(rng, SMALL, 3)
            _, analytic = loss_and_grad(SMALL, params, batch)
            numeric = finite_difference_param_grad(SMALL, params, batch)
            denom = np.maximum(np.maximum(np.abs(analytic.values), np.abs(numeric)), 1e-5)
            rel = np.abs(analytic.values - numeric) / denom
            assert rel.max() < 1e-4

    def test_duplicated_sample_mean_invariance(self):
        rng = np.random.default_rng(3)
        params = init_params(SMALL, rng)
        sample = random_batch(rng, SMALL, 1)[0]
        loss_one, grad_one = loss_and_grad(SMALL, params, [sample])
        loss_two, grad_two = loss_and_grad(SMALL, params, [sample, sample])
        assert loss_two == pytest.approx(loss_one, abs=1e-15)
        assert np.allclose(grad_one.values, grad_two.values, atol=1e-15)

    def test_batch_duplication_leaves_grad_unchanged(self):
        rng = np.random.default_rng(5)
        params = init_params(SMALL, rng)
        batch = random_batch(rng, SMALL, 4)
        _, grad = loss_and_grad(SMALL, params, batch)
        _, grad_dup = loss_and_grad(SMALL, params, batch + batch)
        assert np.allclose(grad.values, grad_dup.values, atol=1e-12)

    def test_empty_batch_rejected(self):
        params = ParamVector(np.zeros(SMALL.param_count), SMALL.layout_id)
        with pytest.raises(ValueError):
            loss_and_grad(SMALL, params, [])


class TestAdamW:
    def fresh(self, dim, lr=0.1, wd=0.0):
        return OptimizerState.fresh(dim, learning_rate=lr, weight_decay=wd)

    def test_zero_grad_zero_decay_fixed_point(self):
        params = ParamVector(np.array([1.0, -2.0, 3.0]), "p")
        grad = ParamVector(np.zeros(3), "p")
        new_params, new_state = adamw_step(params, grad, self.fresh(3))
        assert np.array_equal(new_params.values, params.values)
        assert new_state.step == 1

    def test_first_step_is_signed(self):
        rng = np.random.default_rng(7)
        g = rng.normal(size=16)
        params = ParamVector(np.zeros(16), "p")
        state = OptimizerState.fresh(16, learning_rate=0.01, weight_decay=0.0)
        state.eps = 1e-16
        new_params, _ = adamw_step(params, ParamVector(g, "p"), state)
        assert np.allclose(new_params.values, -0.01 * np.sign(g), atol=1e-10)

    def test_decoupled_decay_shrinks(self):
        params = ParamVector(np.array([2.0, -4.0]), "p")
        grad = ParamVector(np.zeros(2), "p")
        new_params, _ = adamw_step(params, grad, self.fresh(2, lr=0.1, wd=0.5))
        assert np.allclose(new_params.values, params.values * (1 - 0.1 * 0.5), atol=1e-15)

    def test_moments_update(self):
        g = np.array([1.0, -1.0])
        params = ParamVector(np.zeros(2), "p")
        _, state = adamw_step(params, ParamVector(g, "p"), self.fresh(2))
        assert np.allclose(state.m, 0.1 * g)
        assert np.allclose(state.v, 0.001 * g * g)

    def test_length_mismatch(self):
        params = ParamVector(np.zeros(2), "p")
        grad = ParamVector(np.zeros(3), "p")
        with pytest.raises(ValueError):
            adamw_step(params, grad, self.fresh(2))


class TestTrainLocal:
    def toy_data(self, rng, n=4):
        volumes = rng.uniform(0, 1, (n, SMALL.input_voxels))
        masks = (volumes > 0.5).astype(float)
        return volumes, masks

    def test_zero_epochs_identity(self):
        rng = np.random.default_rng(11)
        params = init_params(SMALL, rng)
        volumes, masks = self.toy_data(rng)
        out, _ = train_local(SMALL, params, volumes, masks, 0, rng)
        assert np.array_equal(out.values, params.values)

    def test_loss_decreases_on_toy_task(self):
        rng = np.random.default_rng(13)
        improved = 0
        for trial in range(5):
            data_rng = np.random.default_rng(100 + trial)
            volumes, masks = self.toy_data(data_rng)
            params = init_params(SMALL, data_rng)
            pairs = list(zip(volumes, masks))
            loss_start, _ = loss_and_grad(SMALL, params, pairs)
            trained, _ = train_local(
                SMALL, params, volumes, masks, 50, np.random.default_rng(trial),
                learning_rate=0.01,
            )
            loss_end, _ = loss_and_grad(SMALL, trained, pairs)
            improved += loss_end < loss_start
        assert improved >= 4

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(17)
        volumes, masks = self.toy_data(rng)
        params = init_params(SMALL, rng)
        out1, loss1 = train_local(SMALL, params, volumes, masks, 3, np.random.default_rng(5))
        out2, loss2 = train_local(SMALL, params, volumes, masks, 3, np.random.default_rng(5))
        assert np.array_equal(out1.values, out2.values)
        assert loss1 == loss2

    def test_partial_batch_used(self):
        # 5 samples with batch size 8: one partial batch per epoch, params move.
        rng = np.random.default_rng(19)
        volumes, masks = self.toy_data(rng, n=5)
        params = init_params(SMALL, rng)
        out, _ = train_local(SMALL, params, volumes, masks, 1, np.random.default_rng(0))
        assert not np.array_equal(out.values, params.values)

    def test_empty_split_rejected(self):
        params = ParamVector(np.zeros(SMALL.param_count), SMALL.layout_id)
        with pytest.raises(ValueError):
            train_local(
                SMALL, params, np.zeros((0, 8)), np.zeros((0, 8)), 1, np.random.default_rng(0)
            )

    def test_parameters_stay_finite(self):
        rng = np.random.default_rng(23)
        volumes, masks = self.toy_data(rng)
        params = init_params(SMALL, rng)
        out, _ = train_local(
            SMALL, params, volumes, masks, 100, np.random.default_rng(1), learning_rate=0.05
        )
        assert np.all(np.isfinite(out.values))


class TestInitParams:
    def test_within_fan_limits(self):
        rng = np.random.default_rng(29)
        params = init_params(SMALL, rng)
        limit = np.sqrt(6.0 / (8 + 4))
        assert np.all(np.abs(params.values) <= limit)

    def test_seed_deterministic(self):
        a = init_params(SMALL, np.random.default_rng(42))
        b = init_params(SMALL, np.random.default_rng(42))
        assert np.array_equal(a.values, b.values)
