"""PNG figures for run and comparison reports (non-interactive backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .federation import RoundMetrics  # noqa: E402


def plot_run(history: Sequence[RoundMetrics], initial_val: float, path: str | Path, title: str = "") -> Path:
    """Validation accuracy and labeled-set size per global round."""
    rounds = [0] + [m.round for m in history]
    acc = [initial_val] + [m.val_acc for m in history]
    labeled = [None] + [m.n_total for m in history]

    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.plot(rounds, acc, marker="o", color="tab:blue", label="validation accuracy")
    ax.set_xlabel("global round")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.set_xticks(rounds)
    ax.grid(alpha=0.3)
    twin = ax.twinx()
    twin.bar(rounds[1:], labeled[1:], width=0.4, alpha=0.25, color="tab:orange", label="labeled examples")
    twin.set_ylabel("labeled examples")
    handles = ax.get_legend_handles_labels()
    extra = twin.get_legend_handles_labels()
    ax.legend(handles[0] + extra[0], handles[1] + extra[1], loc="lower right", fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_comparison(rows: Sequence[dict], path: str | Path) -> Path:
    """Test accuracy per arm, annotated with the per-client payload ratio."""
    labels = [f"{r['arm']}\nK={r['clients']}" for r in rows]
    acc = [r["test_acc"] for r in rows]
    colors = ["tab:blue" if r["arm"].startswith("lp") else "tab:gray" for r in rows]

    fig, ax = plt.subplots(figsize=(1.3 * len(rows) + 2.5, 3.6))
    bars = ax.bar(range(len(rows)), acc, color=colors)
    for bar, r in zip(bars, rows):
        ax.annotate(
            f"{r['test_acc']:.3f}\npayload x{r['payload_ratio']:.3f}",
            (bar.get_x() + bar.get_width() / 2, bar.get_height()),
            ha="center", va="bottom", fontsize=7,
        )
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0.0, 1.15)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
