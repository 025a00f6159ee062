"""Figure rendering for the CLI report path.

Figures are companions to the delimited outputs, never a replacement: the
CSV tables stay the artifact of record.  PNG metadata is stripped so
identical inputs produce identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}


def save_method_comparison(summary_rows: list[dict], path) -> None:
    """Bar chart of mean accuracy per method with std error bars."""
    methods = [r["method"] for r in summary_rows]
    means = [100.0 * r["mean_accuracy"] for r in summary_rows]
    stds = [100.0 * r["std_accuracy"] for r in summary_rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(methods)), 3.2))
    xs = np.arange(len(methods))
    ax.bar(xs, means, yerr=stds, capsize=3, color="#4878d0")
    ax.set_xticks(xs)
    ax.set_xticklabels(methods, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("target accuracy (%)")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_loss_curves(histories: dict[str, list[list[dict]]], path) -> None:
    """Per-epoch total loss, one line per method (mean over seeds)."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    for method in sorted(histories):
        runs = histories[method]
        curves = np.array([[e["total"] for e in run] for run in runs])
        ax.plot(np.arange(1, curves.shape[1] + 1), curves.mean(axis=0),
                label=method, linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean total loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_discrepancy_heatmap(matrix, path) -> None:
    """Heatmap of one class's pairwise output distances (darker = larger)."""
    fig, ax = plt.subplots(figsize=(3.4, 3.0))
    im = ax.imshow(matrix.d, cmap="Greys", interpolation="nearest")
    ax.set_title(f"class {matrix.class_id}", fontsize=9)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
