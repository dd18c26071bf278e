"""Loss curves, the eta schedule and accuracy bars rendered to image files.

Figures are built on the Agg canvas directly, without pyplot state, and PNG
metadata is stripped so repeated renders give identical bytes.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .losses import ScheduleConfig, eta_schedule
from .report import Table

LOSS_SERIES = (("loss_cls", "classification"), ("loss_dc", "domain confusion"), ("loss_mmd", "MMD"),
               ("loss_mixup", "mixup"), ("loss_total", "total"))


def _figure(width=6.0, height=3.6) -> Figure:
    fig = Figure(figsize=(width, height), dpi=100)
    FigureCanvasAgg(fig)
    return fig


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    return path


def plot_losses(columns: dict, path) -> dict:
    """One curve per loss term against the epoch; returns the plotted series."""
    if not columns or len(columns.get("epoch", [])) == 0:
        raise ValueError("no epochs to plot")
    epochs = np.asarray(columns["epoch"], dtype=float)
    fig = _figure()
    ax = fig.add_subplot(1, 1, 1)
    series = {}
    for key, label in LOSS_SERIES:
        y = np.asarray(columns[key], dtype=float)
        ax.plot(epochs, y, marker="o", markersize=2, linewidth=1, label=label)
        series[key] = (epochs, y)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss (mean over steps and folds)")
    ax.legend(loc="upper right", fontsize=7)
    _save(fig, path)
    return series


def eta_curve(s: float, f: float, n_epochs: int, samples: int = 200):
    e = np.linspace(0.0, n_epochs, samples)
    eta = np.array([eta_schedule(ScheduleConfig(s=s, f=f, N_e=n_epochs, e=float(x))) for x in e])
    return e, eta


def plot_eta(columns: dict, path, s: float = 0.1, f: float = 0.9) -> dict:
    """Logged eta per epoch (0-based, value used during that epoch) over the
    analytic geometric ramp from ``s`` to ``f``."""
    if not columns or len(columns.get("epoch", [])) == 0:
        raise ValueError("no epochs to plot")
    logged_x = np.asarray(columns["epoch"], dtype=float) - 1.0
    logged = np.asarray(columns["eta"], dtype=float)
    n = len(logged_x)
    ax_x, ax_y = eta_curve(s, f, n)
    fig = _figure(5.0, 3.2)
    ax = fig.add_subplot(1, 1, 1)
    ax.plot(ax_x, ax_y, linewidth=1.2, color="0.4", label="analytic")
    ax.plot(logged_x, logged, linestyle="none", marker="o", markersize=3, label="logged")
    ax.set_xlabel("epoch")
    ax.set_ylabel("eta")
    ax.legend(loc="upper left", fontsize=7)
    _save(fig, path)
    return {"analytic": (ax_x, ax_y), "logged": (logged_x, logged)}


def plot_table_bars(table: Table, path) -> Path:
    """Grouped bars: one group per column (pairs and Average), one bar per row."""
    cols = table.header[1:]
    n_rows = max(len(table.rows), 1)
    x = np.arange(len(cols))
    width = 0.8 / n_rows
    fig = _figure(max(5.0, 1.4 * len(cols)), 3.4)
    ax = fig.add_subplot(1, 1, 1)
    for i, row in enumerate(table.rows):
        vals = [v if isinstance(v, float) else np.nan for v in row[1:]]
        ax.bar(x + (i - (n_rows - 1) / 2) * width, vals, width, label=str(row[0]))
    ax.set_xticks(x)
    ax.set_xticklabels(cols, fontsize=8)
    ax.set_ylabel("top-1 accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=7, loc="lower right")
    return _save(fig, path)
