"""Figures written next to the text reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaltrack import APResult  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_pr_curves(results: dict[str, APResult], path: str | Path, iou: float = 0.7) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, r in results.items():
        ax.step(r.recall, r.precision, where="post", label=f"{label} (AP {r.ap:.3f})")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_title(f"precision-recall @ IoU {iou:g}")
    if results:
        ax.legend(loc="lower left", fontsize=8)
    return _save(fig, path)


def plot_cell_counts(rows: Sequence[dict], path: str | Path) -> Path:
    """Per-frame occupied cells for each mode, one group of bars per scene frame."""
    fig, ax = plt.subplots(figsize=(6, 4))
    keys = [k for k in ("single_cells", "lstm_cells", "concat_cells") if rows and k in rows[0]]
    x = range(len(rows))
    width = 0.8 / max(len(keys), 1)
    for j, k in enumerate(keys):
        ax.bar([i + j * width for i in x], [r[k] for r in rows], width, label=k.replace("_", " "))
    ax.set_xlabel("scene frame")
    ax.set_ylabel("occupied cells")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_training(log_lines: Sequence[str], path: str | Path) -> Path:
    steps, totals = [], []
    for line in log_lines:
        parts = [p.strip() for p in line.split(",")]
        steps.append(int(parts[0]))
        totals.append(float(parts[5]))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(steps, totals, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    return _save(fig, path)
