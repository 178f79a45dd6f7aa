"""Top-N accuracy, confusion matrices, most-confused extraction, EMA smoothing."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .data import _freeze
from .knnpp import Prediction

DEFAULT_TOP_N = (1, 5, 10)
DEFAULT_EMA_ALPHA = 0.9
DEFAULT_MOST_CONFUSED = 5

ABSTAIN_LABEL = "abstain"


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts[true, predicted]; one extra trailing column tallies abstentions
    (queries whose prediction ranked no class at all)."""

    counts: np.ndarray              # (C, C + 1) int64
    label_names: tuple[str, ...]

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        C = len(self.label_names)
        if counts.shape != (C, C + 1):
            raise ValueError(f"counts shape {counts.shape}, expected ({C}, {C + 1})")
        if (counts < 0).any():
            raise ValueError("negative count in confusion matrix")
        object.__setattr__(self, "counts", _freeze(counts))
        object.__setattr__(self, "label_names", tuple(str(s) for s in self.label_names))

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    def supports(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def recalls(self) -> np.ndarray:
        """Per-class recall: diagonal over row sum; NaN where support is 0."""
        support = self.supports().astype(np.float64)
        diag = np.diagonal(self.counts[:, : self.num_classes]).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(support > 0, diag / support, np.nan)


@dataclass(frozen=True)
class AccuracyReport:
    per_n: dict[int, float]
    sample_count: int


def top_n_accuracy(predictions: list[Prediction], labels, n: int) -> float:
    """Fraction of samples whose true label appears in the first n ranked classes."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    labs = [int(x) for x in labels]
    if len(predictions) != len(labs):
        raise ValueError(f"{len(predictions)} predictions for {len(labs)} labels")
    if not predictions:
        raise ValueError("empty input")
    hits = sum(1 for pred, y in zip(predictions, labs) if y in pred.classes()[:n])
    return hits / len(predictions)


def accuracy_report(predictions: list[Prediction], labels, ns=DEFAULT_TOP_N) -> AccuracyReport:
    return AccuracyReport(
        per_n={int(n): top_n_accuracy(predictions, labels, int(n)) for n in ns},
        sample_count=len(predictions),
    )


def confusion_matrix(predictions: list[Prediction], labels, num_classes: int, label_names=None) -> ConfusionMatrix:
    """Tally true class vs top-1 predicted class; empty rankings go to the
    abstain column."""
    labs = [int(x) for x in labels]
    if len(predictions) != len(labs):
        raise ValueError(f"{len(predictions)} predictions for {len(labs)} labels")
    names = tuple(label_names) if label_names is not None else tuple(
        f"class_{i}" for i in range(num_classes)
    )
    if len(names) != num_classes:
        raise ValueError(f"{len(names)} label names for {num_classes} classes")
    counts = np.zeros((num_classes, num_classes + 1), dtype=np.int64)
    for pred, y in zip(predictions, labs):
        if not (0 <= y < num_classes):
            raise ValueError(f"label {y} out of range for {num_classes} classes")
        if pred.ranked:
            top1 = pred.top1()
            if not (0 <= top1 < num_classes):
                raise ValueError(f"predicted class {top1} out of range for {num_classes} classes")
            counts[y, top1] += 1
        else:
            counts[y, num_classes] += 1
    return ConfusionMatrix(counts=counts, label_names=names)


def most_confused(matrix: ConfusionMatrix, m: int = DEFAULT_MOST_CONFUSED) -> list[int]:
    """The m classes with the lowest recall, ascending (ties -> lowest id).

    Classes with zero evaluated samples are excluded; fewer than m classes
    may therefore be returned.
    """
    if m > matrix.num_classes:
        raise ValueError(f"m={m} exceeds {matrix.num_classes} classes")
    recalls = matrix.recalls()
    valid = np.flatnonzero(~np.isnan(recalls))
    if valid.size == 0:
        raise ValueError("every class has zero support")
    order = valid[np.lexsort((valid, recalls[valid]))]
    return [int(c) for c in order[:m]]


def ema_smooth(series, alpha: float = DEFAULT_EMA_ALPHA) -> np.ndarray:
    """Exponential moving average: s_0 = x_0, s_t = alpha*s_{t-1} + (1-alpha)*x_t."""
    if not (0.0 <= alpha < 1.0):
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("series must be a non-empty 1-D sequence")
    if not np.isfinite(x).all():
        raise ValueError("series contains non-finite values")
    out = np.empty_like(x)
    out[0] = x[0]
    for t in range(1, x.size):
        out[t] = alpha * out[t - 1] + (1.0 - alpha) * x[t]
    return out


# ---------------------------------------------------------------------------
# report emission


def write_accuracy_json(report: AccuracyReport, path, most_confused_ids=None) -> None:
    """Emit ``{"top_n": {"1": ..., ...}, "samples": n}`` (plus most-confused ids
    when supplied)."""
    payload = {
        "top_n": {str(n): report.per_n[n] for n in sorted(report.per_n)},
        "samples": report.sample_count,
    }
    if most_confused_ids is not None:
        payload["most_confused"] = [int(c) for c in most_confused_ids]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def write_confusion_csv(matrix: ConfusionMatrix, path) -> None:
    """Emit the count matrix with a label-name header row and column."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["true\\predicted", *matrix.label_names, ABSTAIN_LABEL])
        for c, name in enumerate(matrix.label_names):
            writer.writerow([name, *matrix.counts[c].tolist()])


def write_curve_csv(values, path, columns=("step", "value"), start: int = 0) -> None:
    """Emit a two-column curve CSV (``step,value`` style)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(list(columns))
        for i, v in enumerate(values, start=start):
            writer.writerow([i, repr(float(v))])
