"""Server-side aggregation: weighted averaging and adaptive weight updates.

All functions are pure and keep client order fixed, so results are
bit-reproducible across runs and thread schedules.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .params import ParamVector

SIMPLEX_ATOL = 1e-12
BASE_STEP = 0.1


@dataclass(frozen=True, eq=False)
class AggregationWeights:
    """Per-client simplex weights at a given round.

    Invariants: every value in [0, 1], values sum to 1 within 1e-12, and the
    client count stays fixed for the lifetime of a federation run.
    """

    values: np.ndarray
    round: int = 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size < 1:
            raise ValueError("weights must be a non-empty vector")
        if self.round < 0:
            raise ValueError("round index must be non-negative")
        if np.any(values < 0.0) or np.any(values > 1.0):
            raise ValueError("weights must lie in [0, 1]")
        if abs(float(values.sum()) - 1.0) > SIMPLEX_ATOL:
            raise ValueError("weights must sum to 1")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True, eq=False)
class LossGapVector:
    """Signed per-client validation-loss gaps (post-aggregation minus pre)."""

    gaps: np.ndarray

    def __post_init__(self):
        gaps = np.asarray(self.gaps, dtype=np.float64)
        if gaps.ndim != 1 or gaps.size < 1:
            raise ValueError("gaps must be a non-empty vector")
        gaps = gaps.copy()
        gaps.flags.writeable = False
        object.__setattr__(self, "gaps", gaps)

    def __len__(self) -> int:
        return int(self.gaps.shape[0])


def init_weights(sample_counts: Sequence[int]) -> AggregationWeights:
    """Sample-proportional initial weights: ``w[i] = n_i / sum(n)``."""
    counts = np.asarray(sample_counts, dtype=np.float64)
    if counts.size == 0:
        raise ValueError("need at least one client")
    if np.any(counts <= 0) or np.any(counts != np.floor(counts)):
        raise ValueError("sample counts must be positive integers")
    return AggregationWeights(counts / counts.sum(), round=0)


def aggregate(client_params: Sequence[ParamVector], weights: AggregationWeights) -> ParamVector:
    """Weighted average of client parameter vectors.

    Computed as baseline-plus-weighted-deltas in fixed client order, which
    makes two invariants exact: identical client vectors aggregate to
    themselves, and a one-hot weight vector returns the selected client's
    parameters unchanged.
    """
    if len(client_params) != len(weights):
        raise ValueError(
            f"got {len(client_params)} client vectors for {len(weights)} weights"
        )
    first = client_params[0]
    for p in client_params[1:]:
        if not first.same_layout(p):
            raise ValueError("client parameter vectors disagree on layout")

    w = weights.values
    one_hot = np.flatnonzero(w == 1.0)
    if one_hot.size == 1:
        return ParamVector(client_params[int(one_hot[0])].values, first.layout_id)

    out = first.values.copy()
    for i in range(1, len(client_params)):
        out += w[i] * (client_params[i].values - first.values)
    return ParamVector(out, first.layout_id)


def step_size(t: int, total_rounds: int) -> float:
    """Linearly decaying weight-update step: ``0.1 * (1 - t / T)``."""
    if total_rounds < 1:
        raise ValueError("total rounds must be at least 1")
    if t < 0 or t > total_rounds:
        raise ValueError(f"round index {t} outside [0, {total_rounds}]")
    return BASE_STEP * (1.0 - t / total_rounds)


def compute_loss_gaps(pre_losses: Sequence[float], post_losses: Sequence[float]) -> LossGapVector:
    """Per-client gap between post- and pre-aggregation validation loss."""
    pre = np.asarray(pre_losses, dtype=np.float64)
    post = np.asarray(post_losses, dtype=np.float64)
    if pre.shape != post.shape:
        raise ValueError("pre- and post-aggregation loss lists differ in length")
    return LossGapVector(post - pre)


def update_weights(
    weights: AggregationWeights,
    gaps: LossGapVector,
    step: float,
    fallback: np.ndarray | None = None,
) -> AggregationWeights:
    """Shift weights along the loss gaps, then clip to [0, 1] and renormalize.

    Each weight moves by ``step * gap_i / max_j |gap_j|``; a client whose
    validation loss got worse after aggregation gains weight. A zero step or
    all-zero gaps leave the values bitwise unchanged. If clipping collapses
    every weight to zero, ``fallback`` values (normally the sample-proportional
    initialization) are used; without a fallback the result is uniform.
    """
    if len(gaps) != len(weights):
        raise ValueError("gap vector length does not match weight count")
    if np.any(np.isnan(gaps.gaps)):
        raise ValueError("loss gaps contain NaN")
    if step < 0:
        raise ValueError("step size must be non-negative")

    max_gap = float(np.max(np.abs(gaps.gaps)))
    if step == 0.0 or max_gap == 0.0:
        return AggregationWeights(weights.values, round=weights.round + 1)

    shifted = weights.values + gaps.gaps * (step / max_gap)
    shifted = np.clip(shifted, 0.0, 1.0)
    total = float(shifted.sum())
    if total == 0.0:
        if fallback is not None:
            return AggregationWeights(np.asarray(fallback, dtype=np.float64), round=weights.round + 1)
        uniform = np.full(len(weights), 1.0 / len(weights))
        return AggregationWeights(uniform, round=weights.round + 1)
    return AggregationWeights(shifted / total, round=weights.round + 1)
