"""Experiment orchestration: run the three arms, score them, write reports.

Produces per-seed metric tables in the layout of a multi-center comparison
(one row per center and method plus a test-count-weighted average row and a
signed adaptive-minus-fedavg delta row), round-report streams, weight
trajectories, and summary figures.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .federation import (
    ClientHandle,
    FederationConfig,
    RoundReport,
    run_federated_training,
    run_local_only,
)
from .metrics import (
    EmptyMaskError,
    VoxelMask,
    assd,
    confusion_counts,
    dice,
    hd95,
    jaccard,
    precision,
    recall,
)
from .params import ParamVector
from .synthdata import (
    DEFAULT_DIMS,
    DEFAULT_SPACING,
    CenterSpec,
    ClientDataset,
    default_seven_centers,
    generate_center,
    load_dataset,
    reseed_specs,
    split_dataset,
)
from .trainer import TrainerArchitecture, _forward_batch

ARMS = ("no_fl", "fedavg", "fedavg_aaw")
METRIC_COLUMNS = ("dice", "jaccard", "precision", "recall", "hd95", "assd")
AVERAGE_ROW = "average"
DELTA_METHOD = "aaw_minus_fedavg"
BINARIZE_THRESHOLD = 0.5


@dataclass(frozen=True)
class MetricsRow:
    """The six evaluation metrics for one (center, method) cell of the report."""

    center: str
    method: str
    dice: float
    jaccard: float
    precision: float
    recall: float
    hd95: float | None
    assd: float | None
    n_test: int

    def metric(self, name: str) -> float | None:
        return getattr(self, name)


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of one experiment: dataset, arms, seeds, output."""

    arms: tuple[str, ...] = ARMS
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    rounds: int = 60
    local_epochs: int = 1
    learning_rate: float = 5e-3
    batch_size: int = 8
    weight_decay: float = 0.01
    hidden_units: int = 32
    scale: float = 0.1
    dims: tuple[int, int, int] = DEFAULT_DIMS
    spacing: tuple[float, float, float] = DEFAULT_SPACING
    train_frac: float = 0.64
    val_frac: float = 0.16
    manifest: str | None = None
    centers: tuple[CenterSpec, ...] | None = None
    output_dir: str | None = None
    figures: bool = True

    def __post_init__(self):
        if len(self.arms) == 0:
            raise ValueError("config field 'arms': need at least one arm")
        for arm in self.arms:
            if arm not in ARMS:
                raise ValueError(f"config field 'arms': unknown arm {arm!r}; expected subset of {ARMS}")
        if len(self.seeds) == 0:
            raise ValueError("config field 'seeds': need at least one seed")
        if self.rounds < 1:
            raise ValueError("config field 'rounds': must be at least 1")
        if self.scale <= 0:
            raise ValueError("config field 'scale': must be positive")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        for key in raw:
            if key not in known:
                raise ValueError(f"config field {key!r}: unknown field")
        kwargs = dict(raw)
        for tuple_key in ("arms", "seeds", "dims", "spacing"):
            if tuple_key in kwargs and kwargs[tuple_key] is not None:
                kwargs[tuple_key] = tuple(kwargs[tuple_key])
        if kwargs.get("centers"):
            kwargs["centers"] = tuple(
                CenterSpec(**entry) for entry in kwargs["centers"]
            )
        return cls(**kwargs)

    @classmethod
    def from_json_file(cls, path: str | Path) -> "ExperimentConfig":
        text = Path(path).read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"config parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
        if not isinstance(raw, dict):
            raise ValueError("config root must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        out: dict = {
            "arms": list(self.arms),
            "seeds": list(self.seeds),
            "rounds": self.rounds,
            "local_epochs": self.local_epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "weight_decay": self.weight_decay,
            "hidden_units": self.hidden_units,
            "scale": self.scale,
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "train_frac": self.train_frac,
            "val_frac": self.val_frac,
            "manifest": self.manifest,
            "figures": self.figures,
        }
        return out


@dataclass
class ExperimentReport:
    """Everything an experiment produced, before and after serialization."""

    rows: dict[int, list[MetricsRow]]  # seed -> table rows (centers + average + deltas)
    summary: list[dict]
    failures: list[dict]
    weight_trajectories: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)
    output_dir: Path | None = None

    @property
    def succeeded(self) -> bool:
        return len(self.failures) == 0


def build_datasets(config: ExperimentConfig, seed: int) -> list[ClientDataset]:
    """Resolve the experiment's datasets for one seed.

    A manifest pins the data exactly; otherwise centers are generated with
    per-seed generation seeds so different experiment seeds see different
    draws from the same center distributions.
    """
    if config.manifest is not None:
        return load_dataset(config.manifest)
    specs = list(config.centers) if config.centers is not None else default_seven_centers(config.scale)
    specs = reseed_specs(specs, seed)
    datasets = []
    for spec in specs:
        samples = generate_center(spec, config.dims, config.spacing)
        datasets.append(
            split_dataset(samples, config.train_frac, config.val_frac, seed=spec.seed, name=spec.name)
        )
    return datasets


def evaluate_on_center(
    arch: TrainerArchitecture,
    params: ParamVector,
    dataset: ClientDataset,
    method: str,
) -> MetricsRow:
    """Score one model on one center's test split, averaging per-sample metrics.

    Distance metrics are averaged over the samples where both the thresholded
    prediction and the truth are non-empty; if no sample qualifies the cell is
    reported as missing (None).
    """
    dims = dataset.test[0][1].dims
    spacing = dataset.test[0][1].spacing
    volumes = np.stack([np.asarray(v, dtype=np.float64).ravel() for v, _ in dataset.test])
    _, _, probs = _forward_batch(arch, params.values, volumes)

    overlap = {name: [] for name in ("dice", "jaccard", "precision", "recall")}
    hd_values: list[float] = []
    assd_values: list[float] = []
    for sample_probs, (_, truth) in zip(probs, dataset.test):
        pred = VoxelMask((sample_probs > BINARIZE_THRESHOLD).reshape(dims), spacing)
        counts = confusion_counts(pred, truth)
        overlap["dice"].append(dice(counts))
        overlap["jaccard"].append(jaccard(counts))
        overlap["precision"].append(precision(counts))
        overlap["recall"].append(recall(counts))
        try:
            hd_values.append(hd95(pred, truth))
            assd_values.append(assd(pred, truth))
        except EmptyMaskError:
            pass
    return MetricsRow(
        center=dataset.center,
        method=method,
        dice=float(np.mean(overlap["dice"])),
        jaccard=float(np.mean(overlap["jaccard"])),
        precision=float(np.mean(overlap["precision"])),
        recall=float(np.mean(overlap["recall"])),
        hd95=float(np.mean(hd_values)) if hd_values else None,
        assd=float(np.mean(assd_values)) if assd_values else None,
        n_test=len(dataset.test),
    )


def weighted_average_row(rows: list[MetricsRow], method: str) -> MetricsRow:
    """Test-count-weighted mean of per-center rows.

    Missing distance cells are skipped with their weight renormalized over
    the centers that do have a value; the cell stays missing if none do.
    """
    if not rows:
        raise ValueError("need at least one center row to average")
    weights = np.array([r.n_test for r in rows], dtype=np.float64)

    def mean_of(name: str) -> float | None:
        values = [(r.metric(name), w) for r, w in zip(rows, weights)]
        present = [(v, w) for v, w in values if v is not None]
        if not present:
            return None
        vals = np.array([v for v, _ in present])
        wts = np.array([w for _, w in present])
        return float(np.sum(vals * wts) / np.sum(wts))

    return MetricsRow(
        center=AVERAGE_ROW,
        method=method,
        dice=mean_of("dice"),
        jaccard=mean_of("jaccard"),
        precision=mean_of("precision"),
        recall=mean_of("recall"),
        hd95=mean_of("hd95"),
        assd=mean_of("assd"),
        n_test=int(weights.sum()),
    )


def delta_rows(rows: list[MetricsRow]) -> list[MetricsRow]:
    """Signed (adaptive minus fedavg) difference per center where both arms ran."""
    by_key = {(r.center, r.method): r for r in rows}
    out = []
    centers_seen = []
    for r in rows:
        if r.center not in centers_seen:
            centers_seen.append(r.center)
    for center in centers_seen:
        base = by_key.get((center, "fedavg"))
        adaptive = by_key.get((center, "fedavg_aaw"))
        if base is None or adaptive is None:
            continue

        def diff(name: str) -> float | None:
            a, b = adaptive.metric(name), base.metric(name)
            if a is None or b is None:
                return None
            return a - b

        out.append(
            MetricsRow(
                center=center,
                method=DELTA_METHOD,
                dice=diff("dice"),
                jaccard=diff("jaccard"),
                precision=diff("precision"),
                recall=diff("recall"),
                hd95=diff("hd95"),
                assd=diff("assd"),
                n_test=base.n_test,
            )
        )
    return out


def _check_grid(rows_by_seed: dict[int, list[MetricsRow]]) -> None:
    grids = {
        seed: sorted({(r.center, r.method) for r in rows})
        for seed, rows in rows_by_seed.items()
    }
    reference = None
    for seed, grid in grids.items():
        if reference is None:
            reference = grid
        elif grid != reference:
            raise ValueError(f"inconsistent (center x method) grid across seeds (seed {seed})")


def emit_table(
    rows_by_seed: dict[int, list[MetricsRow]],
    summary: list[dict] | None = None,
    failures: list[dict] | None = None,
    out_dir: str | Path | None = None,
    require_consistent_grid: bool = True,
) -> tuple[str, dict]:
    """Render rows as CSV text and a JSON report object, optionally writing both.

    Column order follows the standard comparison layout: overlap metrics
    first, then the two distance metrics. Missing distance cells become empty
    CSV fields and JSON nulls. The (center x method) grid must agree across
    seeds unless ``require_consistent_grid`` is off (used when some jobs
    failed and were recorded instead of rendered).
    """
    if require_consistent_grid:
        _check_grid(rows_by_seed)
    header = ["seed", "center", "method", *METRIC_COLUMNS, "n_test"]
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    json_rows = []
    for seed in sorted(rows_by_seed):
        for row in rows_by_seed[seed]:
            values = [row.metric(name) for name in METRIC_COLUMNS]
            writer.writerow(
                [seed, row.center, row.method]
                + ["" if v is None else repr(float(v)) for v in values]
                + [row.n_test]
            )
            json_rows.append(
                {
                    "seed": seed,
                    "center": row.center,
                    "method": row.method,
                    **{name: row.metric(name) for name in METRIC_COLUMNS},
                    "n_test": row.n_test,
                }
            )
    csv_text = buffer.getvalue()
    report = {
        "rows": json_rows,
        "summary": summary or [],
        "failures": failures or [],
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.csv").write_text(csv_text)
        (out_dir / "report.json").write_text(json.dumps(report, indent=2, allow_nan=False))
    return csv_text, report


def summarize_across_seeds(rows_by_seed: dict[int, list[MetricsRow]]) -> list[dict]:
    """Mean and standard deviation per (center, method, metric) across seeds."""
    cells: dict[tuple[str, str], dict[str, list[float]]] = {}
    order: list[tuple[str, str]] = []
    for rows in rows_by_seed.values():
        for row in rows:
            key = (row.center, row.method)
            if key not in cells:
                cells[key] = {name: [] for name in METRIC_COLUMNS}
                order.append(key)
            for name in METRIC_COLUMNS:
                value = row.metric(name)
                if value is not None:
                    cells[key][name].append(value)
    summary = []
    for center, method in order:
        entry: dict = {"center": center, "method": method}
        for name in METRIC_COLUMNS:
            values = cells[(center, method)][name]
            if values:
                entry[f"{name}_mean"] = float(np.mean(values))
                entry[f"{name}_std"] = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
            else:
                entry[f"{name}_mean"] = None
                entry[f"{name}_std"] = None
        summary.append(entry)
    return summary


def plot_weight_trajectories(reports: list[RoundReport]) -> np.ndarray:
    """Per-round aggregation weights of an adaptive arm as a (T, K) array.

    Row ``t`` holds the weights the aggregation actually used in round ``t``,
    so row 0 is the sample-proportional initialization.
    """
    if not reports:
        raise ValueError("no round reports given")
    if reports[0].strategy != "fedavg_aaw":
        raise ValueError("weight trajectories are only defined for the adaptive arm")
    return np.array([r.weights_before for r in reports], dtype=np.float64)


def _write_weight_csv(path: Path, trajectory: np.ndarray, client_names: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["round", *client_names])
        for t, row in enumerate(trajectory):
            writer.writerow([t, *[repr(float(w)) for w in row]])


def _federation_config(config: ExperimentConfig, strategy: str, seed: int) -> FederationConfig:
    return FederationConfig(
        total_rounds=config.rounds,
        local_epochs_per_round=config.local_epochs,
        strategy=strategy,
        seed=seed,
        learning_rate=config.learning_rate,
        batch_size=config.batch_size,
        weight_decay=config.weight_decay,
        hidden_units=config.hidden_units,
    )


def _run_arm(
    config: ExperimentConfig,
    arm: str,
    seed: int,
    datasets: list[ClientDataset],
    out_dir: Path | None,
) -> tuple[list[MetricsRow], list[RoundReport]]:
    clients = [ClientHandle.from_dataset(ds) for ds in datasets]
    arch = TrainerArchitecture(int(np.asarray(datasets[0].train[0][0]).size), config.hidden_units)

    sink = None
    sink_file = None
    if out_dir is not None:
        sink_file = open(out_dir / f"rounds_{arm}_{seed}.jsonl", "w")
        sink = lambda report: sink_file.write(json.dumps(report.to_record()) + "\n")
    try:
        if arm == "no_fl":
            results = run_local_only(clients, _federation_config(config, "fedavg", seed), report_sink=sink)
            rows = [
                evaluate_on_center(arch, result.final_global, ds, "no_fl")
                for result, ds in zip(results, datasets)
            ]
            reports = [r for result in results for r in result.reports]
        else:
            result = run_federated_training(clients, _federation_config(config, arm, seed), report_sink=sink)
            rows = [evaluate_on_center(arch, result.final_global, ds, arm) for ds in datasets]
            reports = result.reports
    finally:
        if sink_file is not None:
            sink_file.close()
    rows.append(weighted_average_row(rows, rows[0].method))
    return rows, reports


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Run every (arm, seed) job, score it, and write the report bundle.

    A failing arm is recorded per seed without aborting the others. With an
    output directory set, writes ``report.csv``, ``report.json``, one
    ``rounds_<arm>_<seed>.jsonl`` per job, ``weights_<arm>_<seed>.csv`` for
    adaptive arms, and (unless disabled) rendered figures.
    """
    out_dir = Path(config.output_dir) if config.output_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    rows_by_seed: dict[int, list[MetricsRow]] = {}
    failures: list[dict] = []
    trajectories: dict[tuple[str, int], np.ndarray] = {}
    for seed in config.seeds:
        datasets = build_datasets(config, seed)
        seed_rows: list[MetricsRow] = []
        for arm in config.arms:
            try:
                rows, reports = _run_arm(config, arm, seed, datasets, out_dir)
            except Exception as exc:  # noqa: BLE001 - per-job isolation is the contract
                failures.append({"arm": arm, "seed": seed, "error": str(exc)})
                continue
            seed_rows.extend(rows)
            if arm == "fedavg_aaw":
                trajectory = plot_weight_trajectories(reports)
                trajectories[(arm, seed)] = trajectory
                if out_dir is not None:
                    _write_weight_csv(
                        out_dir / f"weights_{arm}_{seed}.csv",
                        trajectory,
                        [ds.center for ds in datasets],
                    )
        seed_rows.extend(delta_rows(seed_rows))
        rows_by_seed[seed] = seed_rows

    summary = summarize_across_seeds(rows_by_seed)
    emit_table(rows_by_seed, summary, failures, out_dir, require_consistent_grid=not failures)

    report = ExperimentReport(
        rows=rows_by_seed,
        summary=summary,
        failures=failures,
        weight_trajectories=trajectories,
        output_dir=out_dir,
    )
    if out_dir is not None and config.figures:
        from . import figures

        figures.render_experiment_figures(report, out_dir / "figures")
    return report
