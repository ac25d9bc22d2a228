"""Figure rendering for training curves and evaluation reports.

Every CLI path that emits a delimited report also renders the matching
figure next to it.  The Agg backend keeps this headless-safe.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .dataio import ImageRecord
from .metrics import MetricsReport


def _finish(fig, out_path: str | Path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_prior_curves(history: Sequence[dict], out_path: str | Path) -> Path:
    """Critic loss, generator loss and penalty term over adversarial epochs."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    epochs = [row["epoch"] for row in history]
    ax1.plot(epochs, [row["critic_loss"] for row in history], label="critic", lw=1)
    ax1.plot(epochs, [row["generator_loss"] for row in history], label="generator", lw=1)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax2.plot(epochs, [row["gp_term"] for row in history], color="tab:red", lw=1)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("gradient penalty")
    return _finish(fig, out_path)


def plot_train_curves(iter_rows: Sequence[dict], epoch_rows: Sequence[dict], out_path: str | Path) -> Path:
    """Loss components per iteration plus validation Dice per epoch."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    its = [row["iteration"] for row in iter_rows]
    for key, label in (
        ("loss_sup", "supervised"),
        ("loss_unsup_ce", "consistency"),
        ("loss_unsup_prior", "shape prior"),
        ("loss_total", "total"),
    ):
        ax1.plot(its, [row[key] for row in iter_rows], label=label, lw=0.8)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=7)
    epochs = [row["epoch"] for row in epoch_rows]
    val = [row["val_dice"] for row in epoch_rows]
    if any(v is not None for v in val):
        ax2.plot(epochs, [np.nan if v is None else v for v in val], marker="o", ms=2, lw=1)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation Dice")
    ax2.set_ylim(0.0, 1.0)
    return _finish(fig, out_path)


def plot_score_histogram(report: MetricsReport, out_path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    bins = np.linspace(0.0, 100.0, 21)
    ax.hist(report.dice_scores, bins=bins, alpha=0.65, label=f"Dice (mean {report.mean_dice:.2f})")
    ax.hist(report.iou_scores, bins=bins, alpha=0.65, label=f"IoU (mean {report.mean_iou:.2f})")
    ax.set_xlabel("score (%)")
    ax.set_ylabel("images")
    ax.legend(fontsize=8)
    return _finish(fig, out_path)


def plot_examples(
    records: Sequence[ImageRecord],
    predictions: Sequence[np.ndarray],
    out_path: str | Path,
    limit: int = 4,
) -> Path:
    """Image / ground truth / prediction panels for the first few records."""
    n = min(limit, len(records))
    fig, axes = plt.subplots(n, 3, figsize=(7.5, 2.5 * n), squeeze=False)
    for row, (record, pred) in enumerate(zip(records[:n], predictions[:n])):
        panels = (record.image, record.mask, pred)
        titles = ("image", "ground truth", "prediction")
        for col, (panel, title) in enumerate(zip(panels, titles)):
            ax = axes[row][col]
            if panel is None:
                ax.axis("off")
                continue
            ax.imshow(panel, cmap="gray", vmin=0, vmax=1 if panel.max() <= 1 else 255)
            if row == 0:
                ax.set_title(title, fontsize=9)
            ax.set_xticks(())
            ax.set_yticks(())
        axes[row][0].set_ylabel(record.id, fontsize=7)
    return _finish(fig, out_path)
