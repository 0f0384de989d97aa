"""Headless matplotlib renderings of reports and model structure.

Every function writes a PNG to the given path and returns the path, so CLI
report steps can drop figures next to their CSV output without a display.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .graph import soft_adjacency


def training_curves(report, path: str) -> str:
    """Per-task training and validation NLL across epochs."""
    epochs = np.arange(1, report.train_nll.shape[0] + 1)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for k in range(report.train_nll.shape[1]):
        ax.plot(epochs, report.train_nll[:, k], lw=1.2,
                label=f"task {k + 1} train")
        ax.plot(epochs, report.val_nll[:, k], lw=1.2, ls="--",
                label=f"task {k + 1} val")
    if report.best_epoch >= 0 and epochs.size:
        ax.axvline(report.best_epoch + 1, color="gray", lw=0.8, ls=":",
                   label="best epoch")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean NLL")
    ax.set_title("training history")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def experiment_bars(report, path: str, metric: str = "mae") -> str:
    """Median bars with min-max whiskers for every key of one metric."""
    keys = [k for k in sorted(report.metrics) if k.endswith(f"/{metric}")]
    if not keys:
        keys = sorted(report.metrics)
    medians, lows, highs = [], [], []
    for key in keys:
        med, lo, hi = report.spread(key)
        medians.append(med)
        lows.append(med - lo)
        highs.append(hi - med)
    xs = np.arange(len(keys))
    fig, ax = plt.subplots(figsize=(max(6, 1.1 * len(keys)), 4.5))
    ax.bar(xs, medians, yerr=[lows, highs], capsize=3, color="#4878a8")
    ax.set_xticks(xs)
    ax.set_xticklabels([k.rsplit("/", 1)[0] for k in keys],
                       rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(metric)
    ax.set_title(f"{report.kind}: median over seeds {list(report.seeds)}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def map_scatter(x_hat, x_true, path: str, label: str = "MAP estimate") -> str:
    """Estimates against truth with the identity line for reference."""
    a = np.asarray(x_hat, dtype=np.float64).ravel()
    b = np.asarray(x_true, dtype=np.float64).ravel()
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(b, a, s=12, alpha=0.6, edgecolors="none")
    if a.size:
        lo = min(a.min(), b.min())
        hi = max(a.max(), b.max())
        ax.plot([lo, hi], [lo, hi], color="gray", lw=0.8, ls="--")
    ax.set_xlabel("true cause")
    ax.set_ylabel(label)
    ax.set_title("reconstruction")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def adjacency_heatmap(model, path: str) -> str:
    """Soft adjacency as a labeled heatmap (rows = children)."""
    A = soft_adjacency(model.adjacency)
    names = model.spec.names
    n = len(names)
    fig, ax = plt.subplots(figsize=(max(5, 0.35 * n), max(4.5, 0.35 * n)))
    im = ax.imshow(A, cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_xticklabels(names, rotation=90, fontsize=7)
    ax.set_yticklabels(names, fontsize=7)
    ax.set_xlabel("parent")
    ax.set_ylabel("child")
    fig.colorbar(im, ax=ax, shrink=0.8, label="edge weight")
    ax.set_title("adjacency")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
