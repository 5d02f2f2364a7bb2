"""Static figure rendering for run analysis. Everything writes PNG files."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.4,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    # fixed metadata keeps re-rendered files byte-identical
    "svg.hashsalt": "gapadapt",
}


def figsize(scale: float = 1.0) -> tuple[float, float]:
    width = 5.5 * scale
    return width, width * (math.sqrt(5) - 1) / 2


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def line_plot(
    path: Path,
    x: Sequence[float],
    series: Mapping[str, Sequence[float]],
    xlabel: str,
    ylabel: str,
    title: str = "",
) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize())
        for label, ys in series.items():
            ax.plot(x, ys, marker="o", markersize=3, label=label)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if len(series) > 1:
            ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def loss_curves(path: Path, epochs, curves: Mapping[str, Sequence[float]]) -> Path:
    """One panel per curve, sharing the epoch axis."""
    with plt.rc_context(RC):
        n = len(curves)
        fig, axes = plt.subplots(n, 1, figsize=(5.5, 1.6 * n + 0.4), sharex=True, squeeze=False)
        for ax, (name, ys) in zip(axes[:, 0], curves.items()):
            ax.plot(epochs, ys, marker="o", markersize=3)
            ax.set_ylabel(name)
        axes[-1, 0].set_xlabel("epoch")
        fig.tight_layout()
        return _save(fig, path)
