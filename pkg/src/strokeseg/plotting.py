"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_history(history, path: str | Path, title: str | None = None) -> Path:
    """Training loss, validation Dice and learning rate against epoch."""
    epochs = np.array([h.epoch for h in history])
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_lr) = plt.subplots(2, 1, figsize=(5.0, 4.2), sharex=True,
                                             gridspec_kw={"height_ratios": [2, 1]})
        ax_loss.plot(epochs, [h.train_loss for h in history], color="0.3", label="train loss")
        ax_loss.set_ylabel("loss")
        val = [(h.epoch, h.val_dice) for h in history if h.val_dice is not None]
        if val:
            ax_dice = ax_loss.twinx()
            ax_dice.plot(*zip(*val), "o-", color="tab:red", ms=3, label="val Dice")
            ax_dice.set_ylim(0, 1)
            ax_dice.set_ylabel("Dice", color="tab:red")
            ax_dice.spines["right"].set_visible(True)
        ax_lr.plot(epochs, [h.lr for h in history], color="tab:blue")
        ax_lr.set_ylabel("lr")
        ax_lr.set_xlabel("epoch")
        ax_lr.ticklabel_format(axis="y", style="sci", scilimits=(0, 0))
        if title:
            ax_loss.set_title(title)
        return _save(fig, path)


def plot_metrics(report, path: str | Path) -> Path:
    """Per-case distribution of the four challenge metrics."""
    cols = [("dice", "Dice"), ("lesion_f1", "lesion F1"), ("avd_ml", "|ΔV| (ml)"), ("lesion_count_diff", "|Δ count|")]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 4, figsize=(8.0, 2.6))
        rng = np.random.default_rng(0)
        for ax, (key, label) in zip(axes, cols):
            vals = np.array([getattr(r, key) for r in report.rows], dtype=float)
            if vals.size:
                ax.boxplot(vals, widths=0.5, showfliers=False)
                ax.scatter(1 + rng.uniform(-0.12, 0.12, vals.size), vals, s=8, color="tab:red", alpha=0.7, zorder=3)
                ax.axhline(vals.mean(), color="0.5", lw=0.8, ls="--")
            ax.set_title(label)
            ax.set_xticks([])
            if key in ("dice", "lesion_f1"):
                ax.set_ylim(-0.02, 1.02)
        fig.tight_layout()
        return _save(fig, path)


def plot_crossval(header: Sequence[str], rows: Sequence[Sequence[float]], path: str | Path) -> Path:
    """Best validation Dice per fold, one bar group per repeat."""
    data = np.asarray(rows, dtype=float)[:, :-1]
    n_rep, n_fold = data.shape
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.0 + 0.9 * n_fold, 2.8))
        width = 0.8 / n_rep
        for r in range(n_rep):
            ax.bar(np.arange(n_fold) + (r - (n_rep - 1) / 2) * width, data[r], width, label=f"run {r}")
        ax.axhline(np.nanmean(data), color="0.3", ls="--", lw=0.8)
        ax.set_xticks(np.arange(n_fold), header[:-1])
        ax.set_ylim(0, 1)
        ax.set_ylabel("best val Dice")
        if n_rep > 1:
            ax.legend(frameon=False, ncol=n_rep)
        return _save(fig, path)


def plot_overlay(image: np.ndarray, truth: np.ndarray | None, pred: np.ndarray | None, path: str | Path,
                 axis: int = 2) -> Path:
    """Slice with the largest lesion area, ground truth and prediction contoured."""
    ref = truth if truth is not None and truth.any() else pred
    if ref is not None and ref.any():
        idx = int(np.argmax(ref.sum(axis=tuple(a for a in range(3) if a != axis))))
    else:
        idx = image.shape[axis] // 2
    take = lambda a: np.take(a, idx, axis=axis).T  # noqa: E731
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 3.2))
        ax.imshow(take(image), cmap="gray", origin="lower")
        if truth is not None:
            ax.contour(take(truth), levels=[0.5], colors="tab:green", linewidths=1.0)
        if pred is not None:
            ax.contour(take(pred), levels=[0.5], colors="tab:red", linewidths=1.0)
        ax.set_axis_off()
        ax.set_title(f"slice {idx}")
        return _save(fig, path)
