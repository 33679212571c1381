"""CSV emitters and the matplotlib renderings that sit next to them.

Every table the benchmark produces is written as CSV with a header row, and
the figures are rendered from the exact same in-memory values, so the PNGs
are a view of the CSVs rather than a second computation.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import CLASSES, ClassDistribution
from .errors import ContractError
from .evaluation import EVAL_CSV_HEADER, AggregateReport, EvalReport

HISTORY_HEADER = ["epoch", "train_loss", "train_acc", "val_acc", "val_micro_f1"]
SINGLE_MODELS_HEADER = ["method", "n_runs", "accuracy_mean", "accuracy_std",
                 "micro_f1_mean", "micro_f1_std",
                 "tv_distance_mean", "tv_distance_std"]
ENSEMBLES_HEADER = ["method", "n_members", "accuracy", "micro_f1_emotional",
                 "tv_distance"]
DISTRIBUTION_METHODS = ["baseline", "oversample", "undersample", "threshold", "cost"]

_CLASS_COLORS = {"happy": "#e4b33c", "sad": "#5383c6", "angry": "#c0504d",
                 "others": "#8a8a8a"}


def _write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_history_csv(history: list[dict], path) -> None:
    rows = [[row[k] for k in HISTORY_HEADER] for row in history]
    _write_csv(path, HISTORY_HEADER, rows)


def write_eval_reports_csv(reports: list[EvalReport], path) -> None:
    _write_csv(path, EVAL_CSV_HEADER, [r.csv_row() for r in reports])


def write_single_models_csv(aggregates: list[AggregateReport], path) -> None:
    rows = [[a.method, a.n_runs, a.accuracy_mean, a.accuracy_std,
             a.micro_f1_mean, a.micro_f1_std,
             a.tv_distance_mean, a.tv_distance_std] for a in aggregates]
    _write_csv(path, SINGLE_MODELS_HEADER, rows)


def write_ensembles_csv(reports: list[EvalReport], n_members: int, path) -> None:
    rows = [[r.method, n_members, r.accuracy, r.micro_f1_emotional,
             r.tv_distance] for r in reports]
    _write_csv(path, ENSEMBLES_HEADER, rows)


def write_distributions_csv(actual: ClassDistribution,
                            per_method: dict[str, ClassDistribution], path) -> None:
    """One row per class: the gold test distribution next to each method's
    mean predicted distribution."""
    missing = [m for m in DISTRIBUTION_METHODS if m not in per_method]
    if missing:
        raise ContractError(f"missing predicted distributions for {missing}")
    rows = []
    for c, name in enumerate(CLASSES):
        rows.append([name, actual[c]] + [per_method[m][c] for m in DISTRIBUTION_METHODS])
    _write_csv(path, ["class", "actual"] + DISTRIBUTION_METHODS, rows)


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

def plot_distributions(actual: ClassDistribution,
                       per_method: dict[str, ClassDistribution], path) -> None:
    """Grouped bars: per class, the actual share vs each method's predictions."""
    groups = ["actual"] + DISTRIBUTION_METHODS
    values = {g: (actual if g == "actual" else per_method[g]) for g in groups}
    x = np.arange(len(groups))
    width = 0.2
    fig, ax = plt.subplots(figsize=(9, 4))
    for c, name in enumerate(CLASSES):
        heights = [values[g][c] for g in groups]
        ax.bar(x + (c - 1.5) * width, heights, width, label=name,
               color=_CLASS_COLORS[name])
    ax.set_xticks(x)
    ax.set_xticklabels(groups)
    ax.set_ylabel("share of test predictions")
    ax.set_title("Predicted class distributions vs actual")
    ax.legend(ncol=4, fontsize=8)
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_f1_comparison(singles: list[AggregateReport],
                       ensembles: list[EvalReport], path) -> None:
    """Single-model means with std error bars, ensemble scores as markers."""
    methods = [a.method for a in singles]
    x = np.arange(len(methods))
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(x, [a.micro_f1_mean for a in singles],
           yerr=[a.micro_f1_std for a in singles],
           width=0.55, capsize=4, color="#5383c6", label="single (mean over seeds)")
    by_method = {r.method: r for r in ensembles}
    marks = [(i, by_method[m].micro_f1_emotional) for i, m in enumerate(methods)
             if m in by_method]
    if marks:
        ax.scatter([m[0] for m in marks], [m[1] for m in marks],
                   color="#c0504d", zorder=3, label="10-member ensemble")
    if "mixed" in by_method:
        ax.axhline(by_method["mixed"].micro_f1_emotional, color="#7a5dab",
                   linestyle="--", linewidth=1, label="mixed ensemble")
    ax.set_xticks(x)
    ax.set_xticklabels(methods, rotation=15)
    ax.set_ylabel("micro F1 (emotional)")
    ax.set_title("Correction methods, single models vs ensembles")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_history(history: list[dict], path) -> None:
    """Loss on the left axis, accuracy and validation F1 on the right."""
    epochs = [row["epoch"] for row in history]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(epochs, [row["train_loss"] for row in history],
            color="#c0504d", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, [row["train_acc"] for row in history],
             color="#5383c6", label="train acc")
    ax2.plot(epochs, [row["val_micro_f1"] for row in history],
             color="#4f9153", label="val micro F1")
    ax2.set_ylabel("accuracy / F1")
    ax2.set_ylim(0, 1.05)
    lines, labels = ax.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(lines + lines2, labels + labels2, loc="center right", fontsize=8)
    ax.set_title("Training curve")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
