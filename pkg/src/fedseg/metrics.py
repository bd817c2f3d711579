"""Binary segmentation metrics: overlap ratios and surface distances.

Overlap metrics (dice, jaccard, precision, recall) come from exact voxel
counts. HD95 and ASSD measure spacing-scaled Euclidean distances between the
6-connected surfaces of two masks, combining both directions into a single
multiset before taking the percentile or mean, which makes them exactly
symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


class EmptyMaskError(ValueError):
    """Raised when a surface-distance metric is asked about an empty mask."""


@dataclass(frozen=True, eq=False)
class VoxelMask:
    """A binary 3-D voxel grid with physical spacing in mm per voxel."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError("mask data must be a 3-D array")
        if data.dtype != np.bool_:
            unique = np.unique(data)
            if not np.all(np.isin(unique, (0, 1))):
                raise ValueError("mask data must be binary")
            data = data.astype(bool)
        else:
            data = data.copy()
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be three positive values")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def from_flat(
        cls,
        flat: np.ndarray,
        dims: tuple[int, int, int],
        spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    ) -> "VoxelMask":
        return cls(np.asarray(flat).reshape(dims), spacing)


@dataclass(frozen=True)
class ConfusionCounts:
    """Voxelwise agreement counts between a predicted and a true mask."""

    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion_counts(pred: VoxelMask, truth: VoxelMask) -> ConfusionCounts:
    """Exact voxelwise true/false positive/negative counts."""
    if pred.dims != truth.dims:
        raise ValueError(f"mask dims differ: {pred.dims} vs {truth.dims}")
    p = pred.data
    t = truth.data
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(np.count_nonzero(~p & ~t))
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(numer: int, denom: int, other_empty_side: int) -> float:
    # Empty-mask policy: both masks empty -> 1, exactly one empty -> 0.
    if denom == 0:
        return 1.0 if other_empty_side == 0 else 0.0
    return numer / denom


def dice(counts: ConfusionCounts) -> float:
    """Overlap ratio 2tp / (2tp + fp + fn)."""
    return _ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn, 0)


def jaccard(counts: ConfusionCounts) -> float:
    """Intersection over union tp / (tp + fp + fn)."""
    return _ratio(counts.tp, counts.tp + counts.fp + counts.fn, 0)


def precision(counts: ConfusionCounts) -> float:
    """tp / (tp + fp); 1 if both masks empty, 0 if only the prediction is."""
    return _ratio(counts.tp, counts.tp + counts.fp, counts.fn)


def recall(counts: ConfusionCounts) -> float:
    """tp / (tp + fn); 1 if both masks empty, 0 if only the truth is."""
    return _ratio(counts.tp, counts.tp + counts.fn, counts.fp)


def surface_voxels(mask: VoxelMask) -> np.ndarray:
    """Coordinates of foreground voxels with a 6-connected background neighbor.

    Voxels on the grid boundary count as surface. Returns an ``(n, 3)`` int
    array in (z, y, x) order.
    """
    data = mask.data
    if not data.any():
        raise EmptyMaskError("mask has no foreground voxels")
    padded = np.pad(data, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1, 1:-1]
        & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1]
        & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2]
        & padded[1:-1, 1:-1, 2:]
    )
    return np.argwhere(data & ~interior)


def _surface_points_mm(mask: VoxelMask) -> np.ndarray:
    coords = surface_voxels(mask).astype(np.float64)
    return coords * np.asarray(mask.spacing, dtype=np.float64)


def _symmetric_surface_distances(pred: VoxelMask, truth: VoxelMask) -> np.ndarray:
    if pred.dims != truth.dims:
        raise ValueError(f"mask dims differ: {pred.dims} vs {truth.dims}")
    if pred.spacing != truth.spacing:
        raise ValueError(f"mask spacings differ: {pred.spacing} vs {truth.spacing}")
    pts_a = _surface_points_mm(pred)
    pts_b = _surface_points_mm(truth)
    d_ab, _ = cKDTree(pts_b).query(pts_a)
    d_ba, _ = cKDTree(pts_a).query(pts_b)
    # Sorting makes the reduction independent of argument order, so the
    # metrics are exactly symmetric.
    return np.sort(np.concatenate([d_ab, d_ba]))


def hd95(pred: VoxelMask, truth: VoxelMask) -> float:
    """95th percentile (linear interpolation) of the combined surface distances, in mm."""
    return float(np.percentile(_symmetric_surface_distances(pred, truth), 95.0))


def assd(pred: VoxelMask, truth: VoxelMask) -> float:
    """Average of the combined symmetric surface distances, in mm."""
    return float(np.mean(_symmetric_surface_distances(pred, truth)))
