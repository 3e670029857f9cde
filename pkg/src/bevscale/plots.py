"""SVG scaling plots: loss against parameters, examples and training FLOPs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .training import ScalingRecord, efficient_frontier, fit_loglinear, mean_records  # noqa: E402

plt.rcParams["svg.hashsalt"] = "bevscale"


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_model_scaling(records: Sequence[ScalingRecord], path: str | Path) -> Path:
    recs = mean_records(records)
    fits = fit_loglinear(recs) if len({r.params for r in recs}) > 1 else {}
    fig, ax = plt.subplots(figsize=(5, 4))
    for size in sorted({r.examples for r in recs}):
        g = sorted((r for r in recs if r.examples == size), key=lambda r: r.params)
        x = np.array([r.params for r in g])
        line = ax.plot(x, [r.final_loss for r in g], "o", label=f"{size} examples")[0]
        if size in fits:
            xs = np.geomspace(x.min(), x.max(), 32)
            ax.plot(xs, fits[size].intercept + fits[size].slope * np.log10(xs), "--", color=line.get_color())
    ax.set_xscale("log")
    ax.set_xlabel("parameters")
    ax.set_ylabel("eval loss")
    ax.legend()
    return _save(fig, Path(path))


def plot_data_scaling(records: Sequence[ScalingRecord], path: str | Path) -> Path:
    recs = mean_records(records)
    fig, ax = plt.subplots(figsize=(5, 4))
    for params in sorted({r.params for r in recs}):
        g = sorted((r for r in recs if r.params == params), key=lambda r: r.examples)
        ax.plot([r.examples for r in g], [r.final_loss for r in g], "o-", label=f"{params} params")
    ax.set_xscale("log")
    ax.set_xlabel("training examples")
    ax.set_ylabel("eval loss")
    ax.legend()
    return _save(fig, Path(path))


def plot_compute_scaling(records: Sequence[ScalingRecord], path: str | Path) -> Path:
    recs = mean_records(records)
    front = efficient_frontier(recs)
    fig, ax = plt.subplots(figsize=(5, 4))
    for size in sorted({r.examples for r in recs}):
        g = sorted((r for r in recs if r.examples == size), key=lambda r: r.flops)
        ax.plot([r.flops for r in g], [r.final_loss for r in g], "o", label=f"{size} examples")
    ax.plot([r.flops for r in front], [r.final_loss for r in front], "k-", label="efficient frontier")
    ax.set_xscale("log")
    ax.set_xlabel("training FLOPs")
    ax.set_ylabel("eval loss")
    ax.legend()
    return _save(fig, Path(path))


def plot_all(records: Sequence[ScalingRecord], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [plot_model_scaling(records, out / "model_scaling.svg"),
            plot_data_scaling(records, out / "data_scaling.svg"),
            plot_compute_scaling(records, out / "compute_scaling.svg")]
