"""Report rendering: CSV tables plus matplotlib figures saved to files.

Every CLI report path writes a delimited table and, unless figures are
disabled, a PNG next to it. Rendering is headless (Agg) and free of
timestamps, so outputs are reproducible byte-for-byte for fixed inputs.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .dataio import write_text_atomic


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    write_text_atomic(path, buf.getvalue())


def _save(fig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def save_loss_curve(path: str | Path, losses: Sequence[float]) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(1, len(losses) + 1), losses, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("batch loss")
    ax.set_title("training loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def save_bar_chart(path: str | Path, labels: Sequence[str], values: Sequence[float],
                   ylabel: str, title: str, log: bool = False) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(range(len(labels)), values, color="#4878cf")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if log:
        ax.set_yscale("log")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def save_histograms(path: str | Path, panels: Sequence[tuple[str, Sequence[float]]]) -> None:
    """Grid of histograms, one panel per (title, values) pair."""
    n = len(panels)
    cols = 2
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 3 * rows), squeeze=False)
    for i, (title, values) in enumerate(panels):
        ax = axes[i // cols][i % cols]
        if len(values) > 0:
            ax.hist(values, bins=min(30, max(5, len(set(values)))), color="#4878cf")
        ax.set_title(title)
        ax.grid(True, alpha=0.3)
    for j in range(n, rows * cols):
        axes[j // cols][j % cols].axis("off")
    fig.tight_layout()
    _save(fig, path)
