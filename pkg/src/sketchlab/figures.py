"""Matplotlib renderings of the report outputs, written next to the CSV/JSON.

Every renderer writes a PNG with fixed metadata so repeated runs produce
byte-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .cluster import SilhouetteReport
from .data import ClassHistogram
from .evaluate import ConfusionMatrix, ema_smooth
from .project import Projection2D

_PNG_METADATA = {"Software": "sketchlab"}
_DPI = 150


def _save(fig, path) -> None:
    fig.savefig(path, dpi=_DPI, metadata=_PNG_METADATA)
    plt.close(fig)


def save_histogram_png(hist: ClassHistogram, path) -> None:
    """Bar chart of how many classes fall in each class-size bin."""
    fig, ax = plt.subplots(figsize=(6, 4))
    widths = np.diff(hist.bin_edges)
    ax.bar(hist.bin_edges[:-1], hist.bin_counts, width=widths, align="edge",
           color="#4878cf", edgecolor="black", linewidth=0.5)
    ax.set_xlabel("samples per class")
    ax.set_ylabel("number of classes")
    ax.set_title("Class size distribution")
    fig.tight_layout()
    _save(fig, path)


def save_projection_png(proj: Projection2D, label_names, path) -> None:
    """Scatter of the 2-D projection, colored by class."""
    fig, ax = plt.subplots(figsize=(6, 5))
    labels = np.asarray(proj.labels, dtype=np.int64)
    num_classes = len(label_names)
    cmap = plt.get_cmap("tab20" if num_classes <= 20 else "hsv")
    colors = cmap(labels % cmap.N if num_classes > cmap.N else labels / max(num_classes - 1, 1))
    ax.scatter(proj.coords[:, 0], proj.coords[:, 1], c=colors, s=8, linewidths=0)
    if num_classes <= 20:
        for c in range(num_classes):
            ax.scatter([], [], color=cmap(c / max(num_classes - 1, 1)), label=label_names[c], s=20)
        ax.legend(fontsize=6, markerscale=1.2, loc="best", ncol=2)
    ax.set_title(f"{proj.method} projection (objective={proj.objective:.4g})")
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    fig.tight_layout()
    _save(fig, path)


def save_silhouette_png(report: SilhouetteReport, labels, path) -> None:
    """Classic silhouette plot: per-point scores sorted within each label."""
    labels = np.asarray(labels, dtype=np.int64)
    fig, ax = plt.subplots(figsize=(6, 4))
    y = 0
    cmap = plt.get_cmap("tab20")
    for c in np.unique(labels):
        vals = np.sort(report.per_point[labels == c])
        ax.barh(np.arange(y, y + vals.size), vals, height=1.0,
                color=cmap(int(c) % cmap.N), linewidth=0)
        y += vals.size
    ax.axvline(report.overall, color="red", linestyle="--", linewidth=1,
               label=f"overall = {report.overall:.4f}")
    ax.set_xlabel("silhouette coefficient")
    ax.set_ylabel("points (grouped by label)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def save_confusion_png(matrix: ConfusionMatrix, path, class_ids=None) -> None:
    """Heatmap of the confusion counts, optionally restricted to some classes."""
    if class_ids is None:
        class_ids = list(range(matrix.num_classes))
    sub = matrix.counts[np.ix_(class_ids, class_ids)]
    names = [matrix.label_names[c] for c in class_ids]
    fig, ax = plt.subplots(figsize=(5.5, 5))
    im = ax.imshow(sub, cmap="Blues")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right", fontsize=7)
    ax.set_yticks(range(len(names)), names, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(len(names)):
        for j in range(len(names)):
            ax.text(j, i, str(int(sub[i, j])), ha="center", va="center", fontsize=7,
                    color="white" if sub[i, j] > sub.max() / 2 else "black")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    _save(fig, path)


def save_loss_curves_png(train_curve, val_curve, path, ema_alpha: float = 0.9) -> None:
    """Per-step train loss (raw + EMA-smoothed) and per-epoch validation loss."""
    train_curve = np.asarray(train_curve, dtype=np.float64)
    val_curve = np.asarray(val_curve, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = np.arange(train_curve.size)
    ax.plot(steps, train_curve, color="#c0c0c0", linewidth=0.6, label="train loss")
    if train_curve.size:
        ax.plot(steps, ema_smooth(train_curve, ema_alpha), color="#4878cf",
                linewidth=1.4, label=f"train loss (EMA {ema_alpha})")
    if val_curve.size:
        steps_per_epoch = max(train_curve.size // val_curve.size, 1)
        ax.plot((np.arange(val_curve.size) + 1) * steps_per_epoch, val_curve,
                color="#d65f5f", marker="o", markersize=3, linewidth=1.2, label="val loss")
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("cross-entropy loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
