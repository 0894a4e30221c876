"""Figure rendering for experiment reports.

Figures are auxiliary outputs written next to the CSV/JSON products; nothing
downstream reads them back. All functions write a PNG and return its path.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 150


def _new_axes(title: str, xlabel: str, ylabel: str):
    fig, ax = plt.subplots(figsize=(6.0, 3.8))
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def _smooth(values: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(values) < window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def render_loss_traces(traces: dict, path, smooth_window: int = 25) -> Path:
    """Outer-loss curves per seed, raw plus smoothed."""
    fig, ax = _new_axes("Meta-training loss", "outer step", "query loss")
    for label, values in traces.items():
        values = np.asarray(values, dtype=float)
        (line,) = ax.plot(values, alpha=0.25, linewidth=0.8)
        smoothed = _smooth(values, smooth_window)
        offset = len(values) - len(smoothed)
        ax.plot(
            np.arange(offset, len(values)),
            smoothed,
            color=line.get_color(),
            linewidth=1.6,
            label=str(label),
        )
    if traces:
        ax.legend(fontsize=8)
    return _save(fig, path)


def render_accuracy_curves(series: dict, path, xlabel: str = "classes seen") -> Path:
    """Accuracy over sequential checkpoints, one line per labeled series."""
    fig, ax = _new_axes("Sequential accuracy", xlabel, "accuracy (%)")
    for label, points in series.items():
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        ax.plot(xs, ys, marker="o", markersize=3.5, label=str(label))
    ax.set_ylim(0, 100)
    if series:
        ax.legend(fontsize=8)
    return _save(fig, path)


def render_method_bars(values: dict, path, ylabel: str = "final accuracy (%)") -> Path:
    fig, ax = _new_axes("Method comparison", "", ylabel)
    labels = list(values)
    heights = [values[k] for k in labels]
    ax.bar(range(len(labels)), heights, color="tab:blue", width=0.6)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    for x, h in enumerate(heights):
        ax.text(x, h, f"{h:.1f}", ha="center", va="bottom", fontsize=8)
    return _save(fig, path)


def render_task_matrix(acc_matrix: np.ndarray, path, title: str = "Task accuracy") -> Path:
    """Checkpoint-by-task accuracy heatmap for one continual run."""
    fig, ax = plt.subplots(figsize=(4.6, 4.0))
    shown = np.ma.masked_invalid(np.asarray(acc_matrix, dtype=float))
    image = ax.imshow(shown, vmin=0, vmax=100, cmap="viridis")
    ax.set_title(title)
    ax.set_xlabel("task")
    ax.set_ylabel("after training task")
    fig.colorbar(image, ax=ax, label="accuracy (%)")
    return _save(fig, path)
