"""PNG figures for sweep curves, bandwidth reports and strategy tables.

Figures are built on ``matplotlib.figure.Figure`` directly so nothing touches
pyplot's global state or needs a display.
"""

from __future__ import annotations

import math

import numpy as np
from matplotlib.figure import Figure

__all__ = ["plot_bandwidth", "plot_strategies", "plot_sweep"]


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return path


def plot_sweep(sweep, path):
    """Transmitted false positives (and true positives) against score threshold."""
    fig = Figure(figsize=(5.0, 3.5))
    ax = fig.add_subplot()
    ax.plot(sweep.thresholds, sweep.fp_counts, marker="o", ms=3, label="false positives")
    ax.plot(sweep.thresholds, sweep.tp_counts, marker="s", ms=3, ls="--", label="true positives")
    if sweep.zero_fp_threshold <= 1.0:
        ax.axvline(sweep.zero_fp_threshold, color="grey", lw=0.8, ls=":")
        ax.annotate(f"zero FP @ {sweep.zero_fp_threshold:.2f}", (sweep.zero_fp_threshold, max(sweep.fp_counts, default=0)),
                    xytext=(4, -12), textcoords="offset points", fontsize=8)
    ax.set_xlabel("sender score threshold")
    ax.set_ylabel("transmitted boxes")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_bandwidth(report, path):
    """Per-strategy Mbps on a log axis."""
    names = [r.strategy for r in report.rows]
    values = [max(r.mbps, 1e-6) for r in report.rows]
    fig = Figure(figsize=(5.0, 3.5))
    ax = fig.add_subplot()
    bars = ax.bar(names, values, color="tab:blue")
    ax.set_yscale("log")
    ax.set_ylabel(f"Mbps @ {report.fps:g} fps")
    for bar, v in zip(bars, values):
        ax.annotate(f"{v:.3g}", (bar.get_x() + bar.get_width() / 2, v), ha="center", va="bottom", fontsize=8)
    ax.tick_params(axis="x", labelrotation=20)
    return _save(fig, path)


def plot_strategies(table, path):
    """Grouped AP50/AP70 bars; rows without AP (bandwidth references) are skipped."""
    rows = [r for r in table.rows if r.ap50 is not None]
    x = np.arange(len(rows))
    fig = Figure(figsize=(max(4.0, 1.3 * len(rows) + 1.5), 3.5))
    ax = fig.add_subplot()
    ap70 = [r.ap70 if r.ap70 is not None else math.nan for r in rows]
    ax.bar(x - 0.2, [r.ap50 for r in rows], 0.4, label="AP50")
    ax.bar(x + 0.2, ap70, 0.4, label="AP70")
    ax.set_xticks(x, [r.strategy for r in rows], rotation=20)
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("average precision")
    ax.legend(fontsize=8)
    return _save(fig, path)
