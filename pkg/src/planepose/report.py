"""Figures for evaluation and training outputs (rendered to files, no display)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

BAR_METRICS = ("ED_norm", "PA", "NCC", "SSIM")


def metric_bars(summaries: list[dict], path) -> Path:
    """One panel per metric: mean with a one-standard-deviation error bar per method."""
    path = Path(path)
    fig, axes = plt.subplots(1, len(BAR_METRICS), figsize=(3.2 * len(BAR_METRICS), 3.2))
    names = [s["method"] for s in summaries]
    x = np.arange(len(names))
    for ax, metric in zip(axes, BAR_METRICS):
        means = [s[metric][0] for s in summaries]
        stds = [s[metric][1] for s in summaries]
        ax.bar(x, means, yerr=stds, capsize=3, color="0.6", edgecolor="k")
        ax.set_xticks(x, names, rotation=45, ha="right")
        ax.set_title(metric)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def slice_gallery(pairs: list[tuple[np.ndarray, np.ndarray]], path, titles=None) -> Path:
    """Ground-truth slice (top row) over the slice resampled at the predicted pose."""
    path = Path(path)
    n = max(len(pairs), 1)
    fig, axes = plt.subplots(2, n, figsize=(2.2 * n, 4.6), squeeze=False)
    for j, (true_img, pred_img) in enumerate(pairs):
        for i, img in enumerate((true_img, pred_img)):
            axes[i, j].imshow(img, cmap="gray", vmin=0.0, vmax=1.0)
            axes[i, j].set_xticks([])
            axes[i, j].set_yticks([])
        if titles:
            axes[0, j].set_title(titles[j], fontsize=8)
    axes[0, 0].set_ylabel("true")
    axes[1, 0].set_ylabel("predicted")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def training_curves(log_csv, path) -> Path:
    """Train and validation loss per epoch, one line pair per ensemble member."""
    path = Path(path)
    rows = list(csv.DictReader(open(log_csv, newline="")))
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for member in sorted({r["member"] for r in rows}, key=int):
        sel = [r for r in rows if r["member"] == member]
        ep = [int(r["epoch"]) for r in sel]
        ax.plot(ep, [float(r["train_loss"]) for r in sel], lw=1, label=f"train {member}")
        ax.plot(ep, [float(r["val_loss"]) for r in sel], lw=1, ls="--", label=f"val {member}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if rows:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
