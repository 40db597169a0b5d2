"""Figure rendering for the report paths.

Evaluation writes per-task score charts next to the JSON report, and
training writes a loss/learning-rate curve next to the history CSV. All
rendering is headless (Agg) and file-based.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)
import numpy as np  # noqa: E402

from .graph import AU_LABELS  # noqa: E402
from .metrics import EXPR_LABELS, VA_MISSING, MetricReport  # noqa: E402


def _bar_figure(values, labels, title, ylabel, path):
    heights = [v if v is not None else 0.0 for v in values]
    colors = ["#4878a8" if v is not None else "#c0c0c0" for v in values]
    fig, ax = plt.subplots(figsize=(7.0, 3.2))
    ax.bar(range(len(values)), heights, color=colors)
    ax.set_xticks(range(len(values)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_au_f1_figure(report: MetricReport, path) -> None:
    mean = f"{report.p_au:.3f}" if report.p_au is not None else "n/a"
    _bar_figure(report.f1_per_au, AU_LABELS,
                f"Per-AU F1 (macro {mean})", "F1", path)


def save_ex_f1_figure(report: MetricReport, path) -> None:
    mean = f"{report.p_ex:.3f}" if report.p_ex is not None else "n/a"
    _bar_figure(report.f1_per_expr, EXPR_LABELS,
                f"Per-expression F1 (macro {mean})", "F1", path)


def save_va_scatter_figure(va_pred, va_labels, report: MetricReport, path) -> None:
    va_pred = np.asarray(va_pred, dtype=np.float64)
    va_labels = np.asarray(va_labels, dtype=np.float64)
    valid = va_labels[:, 0] != VA_MISSING
    fig, axes = plt.subplots(1, 2, figsize=(7.0, 3.4))
    names = ("valence", "arousal")
    cccs = (report.ccc_valence, report.ccc_arousal)
    for j, ax in enumerate(axes):
        if np.any(valid):
            ax.scatter(va_labels[valid, j], va_pred[valid, j], s=6, alpha=0.4,
                       color="#4878a8")
        ax.plot([-1, 1], [-1, 1], color="#888888", lw=0.8, ls="--")
        ax.set_xlim(-1.05, 1.05)
        ax.set_ylim(-1.05, 1.05)
        ax.set_xlabel(f"true {names[j]}")
        ax.set_ylabel(f"predicted {names[j]}")
        ccc = cccs[j]
        ax.set_title(f"{names[j]} CCC {ccc:.3f}" if ccc is not None
                     else f"{names[j]} (no labels)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report_figures(report: MetricReport, va_pred, va_labels,
                          report_path) -> list:
    """Write the three score figures next to the JSON report."""
    report_path = Path(report_path)
    stem = report_path.parent / report_path.stem
    paths = [Path(f"{stem}_au_f1.png"), Path(f"{stem}_ex_f1.png"),
             Path(f"{stem}_va_scatter.png")]
    save_au_f1_figure(report, paths[0])
    save_ex_f1_figure(report, paths[1])
    save_va_scatter_figure(va_pred, va_labels, report, paths[2])
    return paths


def save_history_figure(history: list, path) -> None:
    """Loss curve with the learning-rate schedule on a twin axis."""
    epochs = [row["epoch"] for row in history]
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.plot(epochs, [row["loss"] for row in history], color="#4878a8", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.grid(alpha=0.3)
    ax2 = ax.twinx()
    ax2.plot(epochs, [row["lr"] for row in history], color="#b8860b",
             lw=0.9, ls="--", label="lr")
    ax2.set_ylabel("learning rate")
    p_tasks = [row["p_task"] for row in history]
    if any(p is not None for p in p_tasks):
        ax3 = ax.twinx()
        ax3.spines.right.set_position(("axes", 1.18))
        ax3.plot(epochs, p_tasks, color="#3a7d44", lw=0.9, label="score")
        ax3.set_ylabel("task score")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
