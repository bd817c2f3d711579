"""Reference local learner: a single-hidden-layer dense network.

Maps a flattened voxel volume to per-voxel foreground probabilities
(ReLU hidden layer, sigmoid output) and trains with mini-batch AdamW on the
combined Dice-BCE loss. Forward, backward, and the optimizer are written
directly on numpy arrays; the backward pass is the exact analytic gradient
of the batch-mean loss.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .losses import PROB_EPS, batch_dice_bce, batch_dice_bce_grad, clamp_probabilities
from .params import ParamVector


@dataclass(frozen=True)
class TrainerArchitecture:
    """Shape of the dense segmentation network: V voxels in, V probabilities out."""

    input_voxels: int = 1024
    hidden_units: int = 32

    def __post_init__(self):
        if self.input_voxels < 1 or self.hidden_units < 1:
            raise ValueError("architecture dimensions must be positive")

    @property
    def layout_id(self) -> str:
        return f"dense-{self.input_voxels}x{self.hidden_units}"

    @property
    def param_count(self) -> int:
        v, h = self.input_voxels, self.hidden_units
        return v * h + h + h * v + v

    def unpack(self, flat: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Split a flat vector into (w_in, b_hidden, w_out, b_out) views."""
        v, h = self.input_voxels, self.hidden_units
        if flat.shape != (self.param_count,):
            raise ValueError(f"expected {self.param_count} parameters, got {flat.shape}")
        w_in = flat[: v * h].reshape(v, h)
        b_hidden = flat[v * h : v * h + h]
        w_out = flat[v * h + h : v * h + h + h * v].reshape(h, v)
        b_out = flat[v * h + h + h * v :]
        return w_in, b_hidden, w_out, b_out

    def pack(self, w_in, b_hidden, w_out, b_out) -> np.ndarray:
        return np.concatenate([w_in.ravel(), b_hidden.ravel(), w_out.ravel(), b_out.ravel()])


@dataclass
class OptimizerState:
    """AdamW moment estimates plus the hyperparameters that drive the update."""

    m: np.ndarray
    v: np.ndarray
    step: int
    learning_rate: float
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.m.shape != self.v.shape:
            raise ValueError("moment vectors differ in length")
        if np.any(self.v < 0):
            raise ValueError("second-moment entries must be non-negative")

    @classmethod
    def fresh(cls, dim: int, learning_rate: float, weight_decay: float) -> "OptimizerState":
        return cls(
            m=np.zeros(dim),
            v=np.zeros(dim),
            step=0,
            learning_rate=learning_rate,
            weight_decay=weight_decay,
        )


def init_params(arch: TrainerArchitecture, rng: np.random.Generator) -> ParamVector:
    """Seeded uniform initialization in +-sqrt(6 / (fan_in + fan_out)) per layer."""
    v, h = arch.input_voxels, arch.hidden_units
    limit_in = np.sqrt(6.0 / (v + h))
    limit_out = np.sqrt(6.0 / (h + v))
    flat = np.concatenate(
        [
            rng.uniform(-limit_in, limit_in, v * h + h),
            rng.uniform(-limit_out, limit_out, h * v + v),
        ]
    )
    return ParamVector(flat, arch.layout_id)


def _check_layout(arch: TrainerArchitecture, params: ParamVector) -> None:
    if params.layout_id != arch.layout_id:
        raise ValueError(
            f"parameter layout {params.layout_id!r} does not match architecture {arch.layout_id!r}"
        )


def _forward_batch(arch, flat, volumes):
    w_in, b_hidden, w_out, b_out = arch.unpack(flat)
    pre_hidden = volumes @ w_in + b_hidden
    hidden = np.maximum(pre_hidden, 0.0)
    logits = hidden @ w_out + b_out
    probs = 1.0 / (1.0 + np.exp(-logits))
    return pre_hidden, hidden, probs


def forward(arch: TrainerArchitecture, params: ParamVector, volume: np.ndarray) -> np.ndarray:
    """Per-voxel foreground probabilities for one flattened volume."""
    _check_layout(arch, params)
    volume = np.asarray(volume, dtype=np.float64).ravel()
    if volume.shape != (arch.input_voxels,):
        raise ValueError(f"expected {arch.input_voxels} voxels, got {volume.shape}")
    if not np.all(np.isfinite(volume)):
        raise ValueError("volume contains non-finite values")
    _, _, probs = _forward_batch(arch, params.values, volume[None, :])
    return probs[0]


def _stack_batch(batch: Sequence[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    volumes = np.stack([np.asarray(v, dtype=np.float64).ravel() for v, _ in batch])
    masks = np.stack([np.asarray(m, dtype=np.float64).ravel() for _, m in batch])
    return volumes, masks


def loss_and_grad(
    arch: TrainerArchitecture,
    params: ParamVector,
    batch: Sequence[tuple[np.ndarray, np.ndarray]],
) -> tuple[float, ParamVector]:
    """Batch-mean Dice-BCE loss and its exact gradient in the flat layout.

    ``batch`` is a sequence of (volume, binary mask) pairs. Raises
    FloatingPointError naming the offending parameter block if any gradient
    entry comes out non-finite.
    """
    _check_layout(arch, params)
    volumes, masks = _stack_batch(batch)
    b = volumes.shape[0]

    _, _, w_out, _ = arch.unpack(params.values)
    pre_hidden, hidden, probs = _forward_batch(arch, params.values, volumes)
    clamped = clamp_probabilities(probs)
    dice_vec, bce_vec = batch_dice_bce(masks, clamped)
    loss = float(np.mean(dice_vec + bce_vec))
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss value")

    d_prob = batch_dice_bce_grad(masks, clamped) / b
    # Clamped probabilities are constant w.r.t. the logits where the clamp binds.
    active = (probs > PROB_EPS) & (probs < 1.0 - PROB_EPS)
    d_logits = d_prob * active * probs * (1.0 - probs)

    g_w_out = hidden.T @ d_logits
    g_b_out = d_logits.sum(axis=0)
    d_hidden = (d_logits @ w_out.T) * (pre_hidden > 0.0)
    g_w_in = volumes.T @ d_hidden
    g_b_hidden = d_hidden.sum(axis=0)

    blocks = {
        "input-weight": g_w_in,
        "hidden-bias": g_b_hidden,
        "output-weight": g_w_out,
        "output-bias": g_b_out,
    }
    for name, block in blocks.items():
        if not np.all(np.isfinite(block)):
            raise FloatingPointError(f"non-finite gradient in {name} block")
    grad = arch.pack(g_w_in, g_b_hidden, g_w_out, g_b_out)
    return loss, ParamVector(grad, arch.layout_id)


def adamw_step(
    params: ParamVector, grad: ParamVector, state: OptimizerState
) -> tuple[ParamVector, OptimizerState]:
    """One AdamW update with bias correction and decoupled weight decay."""
    if len(params) != len(grad) or len(params) != state.m.shape[0]:
        raise ValueError("parameter, gradient, and state lengths disagree")
    g = grad.values
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    update = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    decayed = params.values - update - state.learning_rate * state.weight_decay * params.values
    new_params = ParamVector(decayed, params.layout_id)
    new_state = replace(state, m=m, v=v, step=step)
    return new_params, new_state


def train_local(
    arch: TrainerArchitecture,
    params: ParamVector,
    volumes: np.ndarray,
    masks: np.ndarray,
    epochs: int,
    rng: np.random.Generator,
    *,
    learning_rate: float = 1e-4,
    batch_size: int = 8,
    weight_decay: float = 0.01,
) -> tuple[ParamVector, float]:
    """Mini-batch AdamW training over a client's local split.

    Shuffles with the client-owned ``rng`` each epoch; the last partial batch
    is kept. Returns the updated parameters and the sample-mean loss observed
    during the final epoch (for zero epochs, the current loss of ``params``).
    """
    _check_layout(arch, params)
    volumes = np.asarray(volumes, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    if volumes.ndim != 2 or volumes.shape != masks.shape:
        raise ValueError("training volumes and masks must be matching 2-D arrays")
    n = volumes.shape[0]
    if n == 0:
        raise ValueError("training split must be non-empty")
    if epochs < 0:
        raise ValueError("epoch count must be non-negative")
    if batch_size < 1:
        raise ValueError("batch size must be positive")

    if epochs == 0:
        pairs = list(zip(volumes, masks))
        loss, _ = loss_and_grad(arch, params, pairs)
        return params, loss

    state = OptimizerState.fresh(len(params), learning_rate, weight_decay)
    epoch_loss = 0.0
    for _ in range(epochs):
        order = rng.permutation(n)
        seen = 0
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            pairs = list(zip(volumes[idx], masks[idx]))
            loss, grad = loss_and_grad(arch, params, pairs)
            params, state = adamw_step(params, grad, state)
            epoch_loss += loss * len(idx)
            seen += len(idx)
        epoch_loss /= seen
    return params, epoch_loss
