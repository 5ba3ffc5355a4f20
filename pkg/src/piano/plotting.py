"""Matplotlib figures written next to the CSV reports."""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# Agg writes a Software key; drop it so reruns produce identical PNG bytes.
PNG_METADATA = {"Software": None}


def report_figure(width=6.0, height=None):
    golden = (math.sqrt(5) - 1.0) / 2.0
    height = height or width * golden
    fig, ax = plt.subplots(figsize=(width, height), dpi=100)
    ax.tick_params(labelsize=10)
    ax.grid(True, alpha=0.3, linewidth=0.6)
    return fig, ax


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def plot_leadtime(table, path, title=None, ylabel=None):
    fig, ax = report_figure()
    for label, values in table.rows.items():
        y = [np.nan if v is None else v for v in values]
        ax.plot(table.lead_times, y, marker="o", markersize=4, label=label)
    ax.set_xlabel("lead time (frames)")
    ax.set_ylabel(ylabel or table.metric)
    ax.set_xticks(table.lead_times)
    ax.set_title(title or f"{table.metric} by lead time")
    ax.legend(fontsize=8, frameon=False)
    return _save(fig, path)


def plot_sweep(sweep, path):
    fig, ax = report_figure()
    grid = sweep.grid()
    for a, row in zip(sweep.alphas, grid):
        ax.plot(sweep.table.lead_times, row, marker="o", markersize=4, label=f"alpha = {a:g}")
    ax.set_xlabel("lead time (frames)")
    ax.set_ylabel("MSE")
    ax.set_xticks(sweep.table.lead_times)
    ax.set_title("prediction MSE by PINN weight")
    ax.legend(fontsize=8, frameon=False)
    return _save(fig, path)


def plot_losses(report, path):
    fig, ax = report_figure()
    steps = report.column("step")
    for name in ("L_data", "L_PDE", "L_total"):
        col = report.column(name)
        if np.any(col > 0):
            ax.semilogy(steps, np.maximum(col, 1e-16), label=name, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8, frameon=False)
    return _save(fig, path)


def plot_velocity(frame, vx, vy, path, stride=None, title=None):
    """Quiver of a velocity field over the frame it advects."""
    h, w = frame.shape
    stride = stride or max(1, min(h, w) // 16)
    fig, ax = plt.subplots(figsize=(5, 5 * h / w), dpi=100)
    ax.imshow(frame, cmap="gray", origin="upper")
    yy, xx = np.mgrid[0:h:stride, 0:w:stride]
    ax.quiver(xx, yy, vx[::stride, ::stride], -vy[::stride, ::stride], color="tab:orange",
              angles="xy")
    ax.set_title(title or "extracted velocity")
    ax.set_axis_off()
    return _save(fig, path)


def plot_difference_maps(truth, pred, path, titles=None):
    """Row of signed ``pred - truth`` maps, one panel per lead time."""
    diff = np.asarray(pred) - np.asarray(truth)
    n = diff.shape[0]
    vmax = float(np.abs(diff).max()) or 1.0
    fig, axes = plt.subplots(1, n, figsize=(1.6 * n, 1.9), dpi=100, squeeze=False)
    for k, ax in enumerate(axes[0]):
        im = ax.imshow(diff[k], cmap="RdBu_r", vmin=-vmax, vmax=vmax)
        ax.set_title(titles[k] if titles else f"+{k + 1}", fontsize=8)
        ax.set_axis_off()
    fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8)
    fig.savefig(path, metadata=PNG_METADATA)
    plt.close(fig)
    return path
