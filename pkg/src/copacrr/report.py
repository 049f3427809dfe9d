"""Report rendering: aligned plain-text tables, tab-separated record files,
and matplotlib figures written next to them.

All text output is fully determined by its inputs (fixed float formatting,
no timestamps), so identical runs produce identical bytes.
"""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def fmt_value(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def format_table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    """Monospace table with left-aligned first column and right-aligned rest."""
    cells = [[fmt_value(v) for v in row] for row in rows]
    widths = [len(h) for h in headers]
    for row in cells:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = []
    head = "  ".join(
        h.ljust(widths[i]) if i == 0 else h.rjust(widths[i])
        for i, h in enumerate(headers)
    )
    lines.append(head)
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append(
            "  ".join(
                c.ljust(widths[i]) if i == 0 else c.rjust(widths[i])
                for i, c in enumerate(row)
            )
        )
    return "\n".join(lines) + "\n"


def write_text(path: str, content: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(content)


def write_records(path: str, headers: Sequence[str], rows: Sequence[Sequence]) -> None:
    """Tab-separated records, one line per row, floats at 6 decimals."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(headers) + "\n")
        for row in rows:
            fh.write(
                "\t".join(
                    f"{v:.6f}" if isinstance(v, float) else str(v) for v in row
                )
                + "\n"
            )


def fig_training_curves(
    history: Sequence[tuple[int, float, float]], path: str
) -> None:
    """Loss and validation ERR@20 per iteration, two stacked panels."""
    iterations = [h[0] for h in history]
    losses = [h[1] for h in history]
    errs = [h[2] for h in history]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.plot(iterations, losses, color="tab:red")
    ax1.set_ylabel("mean loss")
    ax1.grid(alpha=0.3)
    ax2.plot(iterations, errs, color="tab:blue")
    ax2.set_ylabel("validation ERR@20")
    ax2.set_xlabel("iteration")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def fig_variant_bars(
    variant_metrics: dict[str, dict[str, float]],
    metric_names: Sequence[str],
    path: str,
    ylabel: str = "pair accuracy",
) -> None:
    """Grouped bars: one group per variant, one bar per metric."""
    variants = list(variant_metrics)
    n_metrics = len(metric_names)
    x = np.arange(len(variants))
    width = 0.8 / max(n_metrics, 1)
    fig, ax = plt.subplots(figsize=(1.6 * len(variants) + 2, 4.5))
    for m, name in enumerate(metric_names):
        values = [variant_metrics[v].get(name, 0.0) for v in variants]
        ax.bar(x + (m - (n_metrics - 1) / 2) * width, values, width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(variants, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def fig_err_per_query(
    per_run: dict[str, list[tuple[str, float]]], path: str
) -> None:
    """Per-query ERR@20 for each evaluated run, one line per run."""
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for run_name, values in per_run.items():
        qids = [q for q, _ in values]
        errs = [e for _, e in values]
        ax.plot(range(len(qids)), errs, marker="o", markersize=3, label=run_name)
    ax.set_xlabel("query (rank order of file)")
    ax.set_ylabel("ERR@20")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
