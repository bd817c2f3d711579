"""Flat parameter vectors exchanged between clients and the server."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_CHECKPOINT_MAGIC = b"FPV1"


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Immutable float64 vector of model parameters bound to a flat layout.

    ``layout_id`` ties the vector to the architecture that produced it, so
    vectors from incompatible layouts can never be mixed in an aggregate.
    """

    values: np.ndarray
    layout_id: str

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("parameter vector must be one-dimensional")
        if values.size == 0:
            raise ValueError("parameter vector must be non-empty")
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter vector contains non-finite entries")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout_id == other.layout_id and len(self) == len(other)


def save_checkpoint(path: str | Path, params: ParamVector, round_index: int) -> None:
    """Write a parameter checkpoint.

    Binary layout, all little-endian: 4-byte magic, u32 layout-id length,
    layout-id bytes (utf-8), u64 parameter count, u64 round index, then the
    parameters as raw float64.
    """
    if round_index < 0:
        raise ValueError("round index must be non-negative")
    layout = params.layout_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(layout)))
        fh.write(layout)
        fh.write(struct.pack("<QQ", len(params), round_index))
        fh.write(params.values.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ParamVector, int]:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"not a parameter checkpoint: bad magic {magic!r}")
        (layout_len,) = struct.unpack("<I", fh.read(4))
        layout_id = fh.read(layout_len).decode("utf-8")
        dim, round_index = struct.unpack("<QQ", fh.read(16))
        raw = fh.read(dim * 8)
        if len(raw) != dim * 8:
            raise ValueError("checkpoint truncated")
        values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return ParamVector(values, layout_id), int(round_index)
