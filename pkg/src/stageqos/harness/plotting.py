"""Line charts rendered from scenario and benchmark results."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "figure.figsize": (7.0, 3.6),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.xmargin": 0,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "lines.linewidth": 1.2,
    "savefig.bbox": "tight",
}


def plot_scenario(result, path: str | Path) -> Path:
    """Completed ops/s per job plus the aggregate, with the ceiling as a dashed line."""
    path = Path(path)
    seconds = range(result.seconds)
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        for job_id, outcome in result.outcomes.items():
            ax.plot(seconds, outcome.completed, label=job_id)
        ax.plot(seconds, result.aggregate, color="black", linewidth=1.6, label="aggregate")
        ax.axhline(result.spec.max_rate, color="red", linestyle="--", linewidth=1, label="max rate")
        ax.set_xlabel("time (s)")
        ax.set_ylabel("completed ops/s")
        ax.set_title(f"{result.spec.name} ({result.spec.algorithm})")
        ax.legend(loc="upper right", ncol=2)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_series(x, series: dict, path: str | Path, *, xlabel: str, ylabel: str, title: str = "",
                logx: bool = False) -> Path:
    """Generic multi-line chart used by the benchmarks."""
    path = Path(path)
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        for label, ys in series.items():
            ax.plot(x, ys, marker="o", markersize=3, label=label)
        if logx:
            ax.set_xscale("log", base=2)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if len(series) > 1:
            ax.legend()
        fig.savefig(path)
        plt.close(fig)
    return path
