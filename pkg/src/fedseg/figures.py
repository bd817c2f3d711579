"""Matplotlib rendering of experiment reports to image files.

Figures accompany the delimited outputs: weight-trajectory lines for each
adaptive run and per-center bar charts comparing the arms.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_METHOD_ORDER = ("no_fl", "fedavg", "fedavg_aaw")
_METHOD_COLORS = {"no_fl": "#777777", "fedavg": "#1f77b4", "fedavg_aaw": "#d62728"}


def render_weight_trajectories(
    trajectory: np.ndarray, client_names: list[str], path: str | Path
) -> None:
    """Line plot of per-client aggregation weights over rounds."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for k, name in enumerate(client_names):
        ax.plot(trajectory[:, k], label=name, lw=1.5)
    ax.set_xlabel("round")
    ax.set_ylabel("aggregation weight")
    ax.set_ylim(bottom=0)
    ax.legend(fontsize=8, ncol=2)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_metric_bars(summary: list[dict], metric: str, path: str | Path) -> None:
    """Grouped bars of a metric's seed-mean per center, one group per method."""
    centers = []
    for entry in summary:
        if entry["method"] in _METHOD_ORDER and entry["center"] not in centers:
            centers.append(entry["center"])
    methods = [
        m for m in _METHOD_ORDER if any(e["method"] == m for e in summary)
    ]
    if not centers or not methods:
        return
    lookup = {(e["center"], e["method"]): e for e in summary}

    x = np.arange(len(centers))
    width = 0.8 / len(methods)
    fig, ax = plt.subplots(figsize=(8, 4))
    for j, method in enumerate(methods):
        means = []
        stds = []
        for center in centers:
            entry = lookup.get((center, method), {})
            mean = entry.get(f"{metric}_mean")
            means.append(np.nan if mean is None else mean)
            std = entry.get(f"{metric}_std")
            stds.append(0.0 if std is None else std)
        ax.bar(
            x + (j - (len(methods) - 1) / 2) * width,
            means,
            width,
            yerr=stds,
            capsize=2,
            label=method,
            color=_METHOD_COLORS.get(method),
        )
    ax.set_xticks(x)
    ax.set_xticklabels(centers, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(metric)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_experiment_figures(report, out_dir: str | Path) -> list[Path]:
    """Render the standard figure set for a finished experiment."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for (arm, seed), trajectory in sorted(report.weight_trajectories.items()):
        names = None
        for rows in report.rows.values():
            names = [r.center for r in rows if r.method == arm and r.center != "average"]
            if names:
                break
        names = names or [f"client {k}" for k in range(trajectory.shape[1])]
        path = out_dir / f"weights_{arm}_{seed}.png"
        render_weight_trajectories(trajectory, names, path)
        written.append(path)
    for metric in ("dice", "hd95"):
        path = out_dir / f"{metric}_by_center.png"
        render_metric_bars(report.summary, metric, path)
        written.append(path)
    return written
