"""Centroid-voting classifier over a per-class sub-cluster model.

A query is ranked against the pooled set of all class centroids; the k
nearest each contribute a vote of weight 1 / sqrt(d) to their owning class
(d clamped below by epsilon so a zero distance stays finite). Class scores
are those weight sums, accumulated in ascending (distance, pooled index)
order, which fixes the floating-point summation order and makes batch
classification bit-reproducible.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .cluster import CentroidModel
from .data import EmbeddingSet

DEFAULT_K_NEIGHBORS = 9
DEFAULT_EPSILON = 1e-12


@dataclass(frozen=True)
class VotingConfig:
    k_neighbors: int = DEFAULT_K_NEIGHBORS
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError(f"k_neighbors must be >= 1, got {self.k_neighbors}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass(frozen=True)
class Prediction:
    """Classes ranked by vote score, descending; ties -> lowest class id."""

    ranked: tuple[tuple[int, float], ...]
    query_index: int | None = None

    def top1(self) -> int:
        if not self.ranked:
            raise ValueError("empty prediction has no top-1 class")
        return self.ranked[0][0]

    def classes(self) -> list[int]:
        return [c for c, _ in self.ranked]


def vote_weight(d: float, epsilon: float = DEFAULT_EPSILON) -> float:
    """Weight of a centroid at distance d: 1 / sqrt(max(d, epsilon))."""
    if d < 0:
        raise ValueError(f"distance must be >= 0, got {d}")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    return 1.0 / math.sqrt(max(d, epsilon))


def _rank_one(dists: np.ndarray, owners: np.ndarray, num_classes: int, config: VotingConfig):
    order = np.argsort(dists, kind="stable")[: config.k_neighbors]
    scores = np.zeros(num_classes)
    np.add.at(scores, owners[order], 1.0 / np.sqrt(np.maximum(dists[order], config.epsilon)))
    present = np.flatnonzero(scores > 0)
    ranked = present[np.lexsort((present, -scores[present]))]
    return tuple((int(c), float(scores[c])) for c in ranked)


def classify(query, model: CentroidModel, config: VotingConfig | None = None) -> Prediction:
    """Rank all classes for one query embedding by centroid-weighted voting."""
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != model.d:
        raise ValueError(f"query dimension {q.shape[0]} does not match model dimension {model.d}")
    ranked = _classify_matrix(q[None, :], model, config or VotingConfig())[0]
    return Prediction(ranked=ranked, query_index=None)


def classify_batch(
    es: EmbeddingSet, model: CentroidModel, config: VotingConfig | None = None
) -> list[Prediction]:
    """Classify every row of the set, preserving row order."""
    if es.d != model.d:
        raise ValueError(f"set dimension {es.d} does not match model dimension {model.d}")
    config = config or VotingConfig()
    if es.n == 0:
        return []
    ranked = _classify_matrix(es.data.astype(np.float64), model, config)
    return [Prediction(ranked=r, query_index=i) for i, r in enumerate(ranked)]


def _classify_matrix(queries: np.ndarray, model: CentroidModel, config: VotingConfig):
    pooled, owners = model.pooled()
    total = pooled.shape[0]
    if total == 0:
        raise ValueError("model has no centroids")
    if config.k_neighbors > total:
        raise ValueError(f"k_neighbors={config.k_neighbors} exceeds {total} pooled centroids")
    cents = pooled.astype(np.float64)
    out = []
    chunk = max(1, int(2e7) // max(1, total * model.d))
    for start in range(0, queries.shape[0], chunk):
        block = queries[start:start + chunk]
        d = np.sqrt(((block[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2))
        for row in d:
            out.append(_rank_one(row, owners, model.num_classes, config))
    return out


# ---------------------------------------------------------------------------
# prediction CSV (scores at 9 significant digits)


def write_predictions_csv(predictions: list[Prediction], path) -> None:
    """Emit ``query_index,rank,class_id,score`` rows (rank is 1-based)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["query_index", "rank", "class_id", "score"])
        for i, pred in enumerate(predictions):
            qi = pred.query_index if pred.query_index is not None else i
            for rank, (cls, score) in enumerate(pred.ranked, start=1):
                writer.writerow([qi, rank, cls, format(score, ".9g")])


def read_predictions_csv(path) -> list[Prediction]:
    """Load predictions written by :func:`write_predictions_csv`.

    Query indices must form a contiguous 0..n-1 range; ranks must be
    contiguous and 1-based within each query.
    """
    by_query: dict[int, list[tuple[int, int, float]]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["query_index", "rank", "class_id", "score"]:
            raise ValueError(f"unexpected predictions header {header!r}")
        for row in reader:
            qi, rank, cls = int(row[0]), int(row[1]), int(row[2])
            by_query.setdefault(qi, []).append((rank, cls, float(row[3])))
    if not by_query:
        return []
    n = max(by_query) + 1
    preds = []
    for qi in range(n):
        entries = sorted(by_query.get(qi, []))
        if [r for r, _, _ in entries] != list(range(1, len(entries) + 1)):
            raise ValueError(f"query {qi} has non-contiguous ranks")
        preds.append(Prediction(ranked=tuple((c, s) for _, c, s in entries), query_index=qi))
    return preds
