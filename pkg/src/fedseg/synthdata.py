"""Deterministic synthetic multi-center segmentation data with domain shift.

Each center draws ellipsoidal foreground blobs whose intensity, noise level,
morphology, and position distributions are center-specific, standing in for
the protocol and population differences between real imaging sites. The
default seven-center roster scales a realistic hospital sample-count
distribution down to desk size.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .metrics import VoxelMask

DEFAULT_DIMS = (16, 32, 32)  # (z, y, x) voxels
DEFAULT_SPACING = (2.0, 1.0, 1.0)  # mm per voxel, coarser slice direction
BASE_BACKGROUND = 0.30
BASE_FOREGROUND = 0.70

_SAMPLE_MAGIC = b"FVS1"

# Sample-count template and per-center domain-shift knobs. Counts follow the
# relative sizes of a real seven-hospital cohort; the three large centers sit
# on one side of the intensity axis and the four small ones on the other, so
# count-proportional averaging is systematically biased away from the small
# centers.
_CENTER_TABLE = [
    # name, count, intensity_shift, noise_sigma, blob_scale, eccentricity, jitter
    ("NYU", 162, +0.10, 0.03, 1.00, 1.20, 0.30),
    ("MCF", 148, +0.16, 0.04, 1.10, 1.40, 0.25),
    ("NU", 206, +0.05, 0.02, 0.90, 1.10, 0.35),
    ("AHN", 17, -0.24, 0.05, 1.25, 1.70, 0.20),
    ("MCA", 25, -0.14, 0.03, 0.80, 1.00, 0.30),
    ("IU", 74, -0.20, 0.04, 1.15, 1.50, 0.25),
    ("EMC", 91, -0.08, 0.02, 0.95, 1.30, 0.30),
]

MIN_CENTER_SAMPLES = 5


@dataclass(frozen=True)
class CenterSpec:
    """Generation recipe for one center's private dataset."""

    name: str
    sample_count: int
    intensity_shift: float = 0.0
    noise_sigma: float = 0.0
    blob_scale: float = 1.0
    blob_eccentricity: float = 1.0
    position_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sample_count < 3:
            raise ValueError("centers need at least 3 samples to survive splitting")
        if self.noise_sigma < 0 or self.position_jitter < 0:
            raise ValueError("noise and jitter must be non-negative")
        if self.blob_scale <= 0 or self.blob_eccentricity <= 0:
            raise ValueError("blob scale and eccentricity must be positive")


@dataclass(frozen=True)
class ClientDataset:
    """One center's disjoint train/validation/test splits of (volume, mask) pairs."""

    center: str
    train: list
    validation: list
    test: list

    def all_samples(self) -> list:
        return list(self.train) + list(self.validation) + list(self.test)


def _draw_blob(spec: CenterSpec, dims, rng: np.random.Generator):
    dz, dy, dx = dims
    base = np.array([dz / 4.0, dy / 4.0, dx / 4.0])
    ecc = np.array(
        [1.0 / np.sqrt(spec.blob_eccentricity), 1.0, np.sqrt(spec.blob_eccentricity)]
    )
    semi = base * ecc * spec.blob_scale * rng.uniform(0.8, 1.2, 3)
    # Keep the blob resolvable and strictly inside the grid with a 1-voxel rim.
    semi = np.clip(semi, 1.1, (np.array(dims) - 4.0) / 2.0)
    mid = np.array([(dz - 1) / 2.0, (dy - 1) / 2.0, (dx - 1) / 2.0])
    max_offset = np.maximum(mid - semi - 1.0, 0.0)
    offset = spec.position_jitter * rng.uniform(-1.0, 1.0, 3) * max_offset
    center = mid + np.clip(offset, -max_offset, max_offset)

    grids = np.ogrid[0:dz, 0:dy, 0:dx]
    dist2 = sum(((g - c) / s) ** 2 for g, c, s in zip(grids, center, semi))
    return dist2 <= 1.0


def generate_center(
    spec: CenterSpec,
    dims: tuple[int, int, int] = DEFAULT_DIMS,
    spacing: tuple[float, float, float] = DEFAULT_SPACING,
) -> list[tuple[np.ndarray, VoxelMask]]:
    """Generate a center's samples deterministically from its spec seed.

    Each sample is a float volume in [0, 1] of shape ``dims`` plus its exact
    blob mask. Degenerate (empty or grid-touching) blobs are redrawn a
    bounded number of times before failing.
    """
    if any(d < 6 for d in dims):
        raise ValueError("volume dims must be at least 6 voxels per axis")
    rng = np.random.default_rng(spec.seed)
    samples = []
    for _ in range(spec.sample_count):
        mask = None
        for _attempt in range(8):
            candidate = _draw_blob(spec, dims, rng)
            if not candidate.any():
                continue
            boundary_hit = (
                candidate[0].any()
                or candidate[-1].any()
                or candidate[:, 0].any()
                or candidate[:, -1].any()
                or candidate[:, :, 0].any()
                or candidate[:, :, -1].any()
            )
            if not boundary_hit:
                mask = candidate
                break
        if mask is None:
            raise RuntimeError(f"center {spec.name}: could not draw a valid blob in 8 tries")
        volume = np.where(mask, BASE_FOREGROUND, BASE_BACKGROUND) + spec.intensity_shift
        if spec.noise_sigma > 0:
            volume = volume + rng.normal(0.0, spec.noise_sigma, size=dims)
        volume = np.clip(volume, 0.0, 1.0)
        samples.append((volume, VoxelMask(mask, spacing)))
    return samples


def split_dataset(
    samples: list,
    train_frac: float,
    val_frac: float,
    seed: int,
    name: str = "",
) -> ClientDataset:
    """Seeded shuffle followed by a contiguous train/validation/test partition.

    Validation gets ``floor(val_frac * n)``, test gets ``ceil`` of its share,
    and train keeps the remainder; each split is clamped to at least one
    sample, which needs ``n >= 3``.
    """
    if not (0.0 < train_frac < 1.0 and 0.0 < val_frac < 1.0):
        raise ValueError("split fractions must lie in (0, 1)")
    if train_frac + val_frac >= 1.0:
        raise ValueError("train and validation fractions must leave room for test")
    n = len(samples)
    if n < 3:
        raise ValueError("need at least 3 samples for three non-empty splits")

    test_frac = 1.0 - train_frac - val_frac
    n_val = min(max(int(np.floor(val_frac * n)), 1), n - 2)
    n_test = min(max(int(np.ceil(test_frac * n)), 1), n - 1 - n_val)
    n_train = n - n_val - n_test

    order = np.random.default_rng(seed).permutation(n)
    pick = lambda idx: [samples[i] for i in idx]
    return ClientDataset(
        center=name,
        train=pick(order[:n_train]),
        validation=pick(order[n_train : n_train + n_val]),
        test=pick(order[n_train + n_val :]),
    )


def default_seven_centers(scale: float, base_seed: int = 0) -> list[CenterSpec]:
    """The seven-center roster with counts scaled from the full-size template.

    Counts are ``max(5, round(scale * template_count))`` so even the smallest
    center survives a three-way split.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    seed_children = np.random.SeedSequence(base_seed).spawn(len(_CENTER_TABLE))
    specs = []
    for (name, count, shift, noise, blob, ecc, jitter), child in zip(
        _CENTER_TABLE, seed_children
    ):
        specs.append(
            CenterSpec(
                name=name,
                sample_count=max(MIN_CENTER_SAMPLES, int(round(scale * count))),
                intensity_shift=shift,
                noise_sigma=noise,
                blob_scale=blob,
                blob_eccentricity=ecc,
                position_jitter=jitter,
                seed=int(child.generate_state(1, np.uint64)[0]),
            )
        )
    return specs


def reseed_specs(specs: list[CenterSpec], seed: int) -> list[CenterSpec]:
    """Derive fresh per-center generation seeds from one experiment seed."""
    children = np.random.SeedSequence([seed, len(specs)]).spawn(len(specs))
    return [
        replace(spec, seed=int(child.generate_state(1, np.uint64)[0]))
        for spec, child in zip(specs, children)
    ]


def _write_sample(path: Path, volume: np.ndarray, mask: VoxelMask) -> None:
    dims = mask.dims
    with open(path, "wb") as fh:
        fh.write(_SAMPLE_MAGIC)
        fh.write(struct.pack("<III", *dims))
        fh.write(struct.pack("<ddd", *mask.spacing))
        fh.write(np.ascontiguousarray(volume, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(mask.data, dtype=np.uint8).tobytes())


def _read_sample(path: Path) -> tuple[np.ndarray, VoxelMask]:
    with open(path, "rb") as fh:
        if fh.read(4) != _SAMPLE_MAGIC:
            raise ValueError(f"not a sample file: {path}")
        dims = struct.unpack("<III", fh.read(12))
        spacing = struct.unpack("<ddd", fh.read(24))
        count = dims[0] * dims[1] * dims[2]
        volume = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(dims).astype(np.float64)
        mask = np.frombuffer(fh.read(count), dtype=np.uint8).reshape(dims).astype(bool)
    return volume, VoxelMask(mask, spacing)


def export_dataset(
    out_dir: str | Path,
    datasets: list[ClientDataset],
    specs: list[CenterSpec] | None = None,
) -> Path:
    """Write samples plus a manifest describing centers and split membership.

    Returns the manifest path. One binary file per sample: magic, dims,
    spacing, volume float64, mask uint8, all little-endian.
    """
    out_dir = Path(out_dir)
    samples_dir = out_dir / "samples"
    samples_dir.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"centers": []}
    spec_by_name = {s.name: s for s in specs} if specs else {}
    for ds in datasets:
        entry: dict = {"name": ds.center, "splits": {}}
        spec = spec_by_name.get(ds.center)
        if spec is not None:
            entry["spec"] = {
                "sample_count": spec.sample_count,
                "intensity_shift": spec.intensity_shift,
                "noise_sigma": spec.noise_sigma,
                "blob_scale": spec.blob_scale,
                "blob_eccentricity": spec.blob_eccentricity,
                "position_jitter": spec.position_jitter,
                "seed": spec.seed,
            }
        for split_name, split in (
            ("train", ds.train),
            ("validation", ds.validation),
            ("test", ds.test),
        ):
            files = []
            for k, (volume, mask) in enumerate(split):
                fname = f"{ds.center}_{split_name}_{k:04d}.bin"
                _write_sample(samples_dir / fname, volume, mask)
                files.append(fname)
            entry["splits"][split_name] = files
        manifest["centers"].append(entry)
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return manifest_path


def load_dataset(manifest_path: str | Path) -> list[ClientDataset]:
    """Load the datasets described by an exported manifest."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    samples_dir = manifest_path.parent / "samples"
    datasets = []
    for entry in manifest["centers"]:
        splits = {}
        for split_name in ("train", "validation", "test"):
            splits[split_name] = [
                _read_sample(samples_dir / fname) for fname in entry["splits"][split_name]
            ]
        datasets.append(
            ClientDataset(
                center=entry["name"],
                train=splits["train"],
                validation=splits["validation"],
                test=splits["test"],
            )
        )
    return datasets
