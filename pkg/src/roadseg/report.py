"""Figure rendering for run artifacts.

Every function takes plain arrays or log records and writes one PNG.
The Agg backend is forced so rendering works headless, and nothing here
depends on wall-clock state, so reruns produce byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FIGURE_DPI = 120


def _finish(fig, path: Union[str, Path]) -> None:
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)


def save_gan_curves(log: Sequence, path: Union[str, Path]) -> None:
    """Two panels over optimizer steps: adversarial losses and mean scores."""
    steps = [rec.step for rec in log]
    fig, (ax_loss, ax_score) = plt.subplots(1, 2, figsize=(10, 4), layout="constrained")
    ax_loss.plot(steps, [rec.d_loss for rec in log], label="discriminator")
    ax_loss.plot(steps, [rec.g_loss for rec in log], label="generator")
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_score.plot(steps, [rec.real_score for rec in log], label="real")
    ax_score.plot(steps, [rec.fake_score for rec in log], label="fake")
    ax_score.axhline(0.5, color="gray", linewidth=0.8, linestyle="--")
    ax_score.set_xlabel("step")
    ax_score.set_ylabel("mean discriminator score")
    ax_score.set_ylim(0.0, 1.0)
    ax_score.legend()
    _finish(fig, path)


def save_seg_curves(log: Sequence, path: Union[str, Path]) -> None:
    """Two panels over epochs: losses and segmentation quality."""
    epochs = [rec.epoch for rec in log]
    fig, (ax_loss, ax_q) = plt.subplots(1, 2, figsize=(10, 4), layout="constrained")
    ax_loss.plot(epochs, [rec.train_loss for rec in log], label="train")
    ax_loss.plot(epochs, [rec.val_loss for rec in log], label="validation")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_q.plot(epochs, [rec.miou for rec in log], label="mIoU")
    ax_q.plot(epochs, [rec.mean_acc for rec in log], label="mean accuracy")
    ax_q.set_xlabel("epoch")
    ax_q.set_ylim(0.0, 1.0)
    ax_q.legend()
    _finish(fig, path)


def save_class_histogram(class_names: Sequence[str], counts: Sequence[int],
                         path: Union[str, Path]) -> None:
    fig, ax = plt.subplots(figsize=(6, 4), layout="constrained")
    ax.bar(list(class_names), list(counts))
    ax.set_ylabel("instances")
    ax.tick_params(axis="x", rotation=20)
    _finish(fig, path)


def save_heatmap_grid(class_names: Sequence[str], heatmaps: np.ndarray,
                      path: Union[str, Path]) -> None:
    """One panel per class of spatial annotation density in [0, 1]."""
    k = len(class_names)
    fig, axes = plt.subplots(1, k, figsize=(3 * k, 3.4), layout="constrained")
    for ax, name, grid in zip(np.atleast_1d(axes), class_names, heatmaps):
        ax.imshow(grid, cmap="magma", vmin=0.0, vmax=1.0)
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
    _finish(fig, path)


def save_confusion_figure(normalized: np.ndarray, class_names: Sequence[str],
                          path: Union[str, Path]) -> None:
    """Row-normalized confusion matrix with a background row/column last."""
    names = list(class_names) + ["background"]
    n = len(names)
    fig, ax = plt.subplots(figsize=(1.1 * n + 2, 1.1 * n + 1), layout="constrained")
    ax.imshow(normalized, cmap="Blues", vmin=0.0, vmax=1.0)
    for r in range(n):
        for c in range(n):
            v = normalized[r, c]
            ax.text(c, r, f"{v:.2f}", ha="center", va="center",
                    color="white" if v > 0.5 else "black", fontsize=8)
    ax.set_xticks(range(n), names, rotation=30, ha="right")
    ax.set_yticks(range(n), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    _finish(fig, path)


def save_metric_bars(class_names: Sequence[str], values: np.ndarray,
                     mean_value: float, label: str, path: Union[str, Path]) -> None:
    """Per-class bars plus a mean reference line; NaN classes plot as zero."""
    vals = np.asarray(values, dtype=np.float64)
    heights = np.where(np.isfinite(vals), vals, 0.0)
    fig, ax = plt.subplots(figsize=(6, 4), layout="constrained")
    ax.bar(list(class_names), heights)
    if np.isfinite(mean_value):
        ax.axhline(mean_value, color="black", linewidth=0.9, linestyle="--",
                   label=f"mean {mean_value:.3f}")
        ax.legend()
    ax.set_ylabel(label)
    ax.set_ylim(0.0, 1.05)
    ax.tick_params(axis="x", rotation=20)
    _finish(fig, path)
