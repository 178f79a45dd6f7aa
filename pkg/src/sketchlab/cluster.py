"""KMeans++ seeding, Lloyd iteration, per-class centroid models, silhouettes.

Distances are Euclidean everywhere. All ties (nearest centroid, best
restart, sort order) break toward the lowest index, so results are
deterministic bit-for-bit for a fixed seed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import DatasetFormatError, EmbeddingSet, _freeze

MODEL_VERSION = 1
MODEL_META_FILE = "model.json"
MODEL_CENTROIDS_FILE = "centroids.f32"

DEFAULT_K_PER_CLASS = 3
DEFAULT_EXEMPLARS = 4


@dataclass(frozen=True)
class KMeansConfig:
    k: int
    max_iters: int = 300
    tol: float = 1e-6          # relative inertia improvement below which we stop
    restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tol < 0:
            raise ValueError(f"tol must be >= 0, got {self.tol}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")


@dataclass(frozen=True)
class LloydResult:
    centroids: np.ndarray          # (k, d)
    assignments: np.ndarray        # (n,) index of nearest centroid
    inertia: float                 # sum of squared distances to assigned centroid
    inertia_history: tuple[float, ...]  # per-iteration inertia of the winning restart

    def __post_init__(self):
        object.__setattr__(self, "centroids", _freeze(np.asarray(self.centroids, dtype=np.float64)))
        object.__setattr__(self, "assignments", _freeze(np.asarray(self.assignments, dtype=np.int64)))


@dataclass(frozen=True)
class CentroidModel:
    """Per-class sub-cluster centroids in embedding space.

    ``centroids[c]`` is a (k_c, d) float32 matrix. The pooled view used by
    the voting classifier concatenates classes in id order.
    """

    centroids: tuple[np.ndarray, ...]
    label_names: tuple[str, ...]
    d: int

    def __post_init__(self):
        cents = []
        for c, m in enumerate(self.centroids):
            m = np.ascontiguousarray(m, dtype=np.float32)
            if m.ndim != 2 or m.shape[1] != self.d:
                raise ValueError(f"class {c} centroids have shape {m.shape}, expected (k, {self.d})")
            if m.shape[0] < 1:
                raise ValueError(f"class {c} has no centroids")
            if not np.isfinite(m).all():
                raise ValueError(f"class {c} centroids contain non-finite values")
            cents.append(_freeze(m))
        if len(cents) != len(self.label_names):
            raise ValueError(
                f"{len(cents)} centroid groups for {len(self.label_names)} label names"
            )
        object.__setattr__(self, "centroids", tuple(cents))
        object.__setattr__(self, "label_names", tuple(str(s) for s in self.label_names))

    @property
    def num_classes(self) -> int:
        return len(self.centroids)

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        """(P, d) matrix of all centroids plus the (P,) owning class ids."""
        mats = np.concatenate(self.centroids, axis=0)
        owners = np.repeat(
            np.arange(self.num_classes, dtype=np.int64),
            [m.shape[0] for m in self.centroids],
        )
        return mats, owners


@dataclass(frozen=True)
class SilhouetteReport:
    per_point: np.ndarray   # (n,) values in [-1, 1]
    overall: float          # arithmetic mean of per_point

    def __post_init__(self):
        object.__setattr__(self, "per_point", _freeze(np.asarray(self.per_point, dtype=np.float64)))


@dataclass(frozen=True)
class CentroidExemplars:
    """Rows of one class closest to one of its centroids, ascending distance."""

    centroid: int
    rows: np.ndarray        # global row indices into the source set
    distances: np.ndarray
    truncated: bool         # fewer than the requested rows were assigned here

    def __post_init__(self):
        object.__setattr__(self, "rows", _freeze(np.asarray(self.rows, dtype=np.int64)))
        object.__setattr__(self, "distances", _freeze(np.asarray(self.distances, dtype=np.float64)))


# ---------------------------------------------------------------------------
# k-means


def _as_points(points) -> np.ndarray:
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError(f"points must be a 2-D matrix, got shape {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValueError("points contain non-finite values")
    return pts


def _sq_dists(pts: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(n, k) squared Euclidean distances, computed directly (no expansion)."""
    return ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def kmeanspp_seed(points, k: int, seed: int = 0) -> np.ndarray:
    """Choose k rows by D^2 seeding: first uniform, later picks proportional
    to squared distance from the nearest already-chosen row."""
    pts = _as_points(points)
    n = pts.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds {n} points")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    taken = np.zeros(n, dtype=bool)
    taken[chosen[0]] = True
    d2 = ((pts - pts[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        d2[taken] = 0.0
        total = d2.sum()
        if total > 0.0:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            idx = min(idx, n - 1)
            if taken[idx] or d2[idx] == 0.0:  # float-edge guard
                idx = int(np.flatnonzero(~taken & (d2 > 0))[0])
        else:
            # remaining points coincide with chosen centers: lowest index wins
            idx = int(np.flatnonzero(~taken)[0])
        chosen.append(idx)
        taken[idx] = True
        d2 = np.minimum(d2, ((pts - pts[idx]) ** 2).sum(axis=1))
    return pts[chosen].copy()


def _lloyd_single(pts: np.ndarray, centers: np.ndarray, max_iters: int, tol: float):
    n = pts.shape[0]
    k = centers.shape[0]
    centers = centers.copy()
    history: list[float] = []
    prev = np.inf
    for _ in range(max_iters):
        d2 = _sq_dists(pts, centers)
        assign = d2.argmin(axis=1)
        min_d2 = d2[np.arange(n), assign]
        inertia = float(min_d2.sum())
        if history and inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"inertia increased: {history[-1]} -> {inertia}")
        history.append(inertia)
        if np.isfinite(prev) and (prev - inertia) <= tol * prev:
            return centers, assign, inertia, history
        prev = inertia

        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, pts)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            # reseed each empty centroid at the point farthest from its
            # currently assigned centroid, one point per empty slot
            spare = min_d2.copy()
            for j in np.flatnonzero(~nonempty):
                far = int(spare.argmax())
                centers[j] = pts[far]
                spare[far] = -1.0

    # max_iters exhausted right after an update: one consistency pass so the
    # returned assignments are argmin against the returned centroids
    d2 = _sq_dists(pts, centers)
    assign = d2.argmin(axis=1)
    inertia = float(d2[np.arange(n), assign].sum())
    history.append(inertia)
    return centers, assign, inertia, history


def lloyd_fit(points, config: KMeansConfig) -> LloydResult:
    """Best-of-restarts KMeans++: seeding then Lloyd iteration to convergence.

    Returns the restart with the lowest inertia (ties -> earliest restart).
    Inertia is non-increasing within a run; this is asserted every step.
    """
    pts = _as_points(points)
    if config.k > pts.shape[0]:
        raise ValueError(f"k={config.k} exceeds {pts.shape[0]} points")
    seeds = np.random.SeedSequence(config.seed).generate_state(config.restarts)
    best = None
    for r in range(config.restarts):
        centers = kmeanspp_seed(pts, config.k, int(seeds[r]))
        result = _lloyd_single(pts, centers, config.max_iters, config.tol)
        if best is None or result[2] < best[2]:
            best = result
    centers, assign, inertia, history = best
    return LloydResult(centers, assign, inertia, tuple(history))


def fit_class_centroids(
    es: EmbeddingSet,
    k_per_class: int = DEFAULT_K_PER_CLASS,
    config: KMeansConfig | None = None,
) -> CentroidModel:
    """Fit ``k_per_class`` sub-cluster centroids independently per class.

    ``config`` supplies iteration/restart/seed settings; its ``k`` is
    replaced by ``k_per_class``. Per-class seeds derive from ``config.seed``.
    """
    if config is None:
        config = KMeansConfig(k=k_per_class)
    counts = es.class_counts()
    short = np.flatnonzero(counts < k_per_class)
    if short.size:
        c = int(short[0])
        raise ValueError(
            f"class {c} ({es.label_names[c]}) has {int(counts[c])} rows, fewer than k_per_class={k_per_class}"
        )
    class_seeds = np.random.SeedSequence(config.seed).generate_state(es.num_classes)
    cents = []
    for c in range(es.num_classes):
        rows = es.data[es.labels == c]
        fit = lloyd_fit(rows, replace(config, k=k_per_class, seed=int(class_seeds[c])))
        cents.append(fit.centroids.astype(np.float32))
    return CentroidModel(tuple(cents), es.label_names, es.d)


# ---------------------------------------------------------------------------
# silhouette


def silhouette(points, labels) -> SilhouetteReport:
    """Per-point silhouette s = (b - a) / max(a, b) and its mean.

    ``a`` is the mean distance to the other points sharing the label, ``b``
    the smallest mean distance to any other label's points. Points in
    singleton clusters score 0, as does the degenerate a = b = 0 case.
    """
    pts = _as_points(points)
    labs = np.asarray(labels)
    n = pts.shape[0]
    if n == 0:
        raise ValueError("empty input")
    if labs.shape != (n,):
        raise ValueError(f"labels shape {labs.shape} does not match {n} points")
    uniq, inv = np.unique(labs, return_inverse=True)
    if uniq.size < 2:
        raise ValueError("silhouette needs at least 2 distinct labels")

    sq = (pts ** 2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (pts @ pts.T)
    np.maximum(d2, 0.0, out=d2)
    dist = np.sqrt(d2)
    np.fill_diagonal(dist, 0.0)

    masks = np.equal(inv[:, None], np.arange(uniq.size)[None, :])
    counts = masks.sum(axis=0)
    mean_to = (dist @ masks) / counts[None, :]

    own = mean_to[np.arange(n), inv]
    own_counts = counts[inv]
    a = np.where(own_counts > 1, own * own_counts / np.maximum(own_counts - 1, 1), 0.0)
    b = np.where(masks, np.inf, mean_to).min(axis=1)

    denom = np.maximum(a, b)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(denom > 0, (b - a) / denom, 0.0)
    s = np.where(own_counts > 1, s, 0.0)
    s = np.clip(s, -1.0, 1.0)
    return SilhouetteReport(per_point=s, overall=float(s.mean()))


def write_silhouette_csv(report: SilhouetteReport, labels, path) -> None:
    """Emit ``point_index,label,s_i`` rows."""
    labs = np.asarray(labels)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["point_index", "label", "s_i"])
        for i, s in enumerate(report.per_point):
            writer.writerow([i, int(labs[i]), repr(float(s))])


# ---------------------------------------------------------------------------
# exemplars


def exemplars_near_centroids(
    es: EmbeddingSet,
    model: CentroidModel,
    class_id: int,
    top_m: int = DEFAULT_EXEMPLARS,
) -> list[CentroidExemplars]:
    """The ``top_m`` rows of a class nearest each of its centroids.

    Rows are listed under their nearest centroid only, ascending by distance
    (ties -> lowest row index). Centroids owning fewer than ``top_m`` rows
    return what they have, flagged ``truncated``.
    """
    if not (0 <= class_id < model.num_classes):
        raise ValueError(f"class_id {class_id} out of range for {model.num_classes} classes")
    if top_m < 1:
        raise ValueError(f"top_m must be >= 1, got {top_m}")
    if es.d != model.d:
        raise ValueError(f"set dimension {es.d} does not match model dimension {model.d}")
    rows = np.flatnonzero(es.labels == class_id)
    cents = np.asarray(model.centroids[class_id], dtype=np.float64)
    dists = np.sqrt(_sq_dists(es.data[rows].astype(np.float64), cents))
    nearest = dists.argmin(axis=1)
    out = []
    for j in range(cents.shape[0]):
        mine = np.flatnonzero(nearest == j)
        order = np.lexsort((rows[mine], dists[mine, j]))
        take = mine[order][:top_m]
        out.append(
            CentroidExemplars(
                centroid=j,
                rows=rows[take],
                distances=dists[take, j],
                truncated=mine.size < top_m,
            )
        )
    return out


def write_exemplars_csv(per_centroid: list[CentroidExemplars], class_id: int, path) -> None:
    """Emit ``class,centroid,rank,row,distance`` rows (rank is 1-based)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["class", "centroid", "rank", "row", "distance"])
        for ex in per_centroid:
            for rank, (row, dist) in enumerate(zip(ex.rows, ex.distances), start=1):
                writer.writerow([class_id, ex.centroid, rank, int(row), repr(float(dist))])


# ---------------------------------------------------------------------------
# model persistence


def save_centroid_model(model: CentroidModel, path) -> None:
    """Write ``model.json`` plus concatenated little-endian f32 centroids."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": MODEL_VERSION,
        "d": model.d,
        "classes": [
            {"label": name, "k": int(m.shape[0])}
            for name, m in zip(model.label_names, model.centroids)
        ],
    }
    (root / MODEL_META_FILE).write_text(json.dumps(meta), encoding="utf-8")
    pooled = np.concatenate(model.centroids, axis=0)
    (root / MODEL_CENTROIDS_FILE).write_bytes(pooled.astype("<f4").tobytes())


def load_centroid_model(path) -> CentroidModel:
    root = Path(path)
    meta_path = root / MODEL_META_FILE
    if not meta_path.is_file():
        raise DatasetFormatError(f"missing {MODEL_META_FILE} in {root}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("version") != MODEL_VERSION:
        raise DatasetFormatError(f"unsupported model version {meta.get('version')!r}")
    d = int(meta["d"])
    ks = [int(c["k"]) for c in meta["classes"]]
    names = tuple(str(c["label"]) for c in meta["classes"])
    raw = (root / MODEL_CENTROIDS_FILE).read_bytes()
    expected = sum(ks) * d * 4
    if len(raw) != expected:
        raise DatasetFormatError(
            f"{MODEL_CENTROIDS_FILE} holds {len(raw)} bytes, expected {expected}"
        )
    flat = np.frombuffer(raw, dtype="<f4").reshape(sum(ks), d)
    cents = []
    at = 0
    for k in ks:
        cents.append(flat[at:at + k])
        at += k
    return CentroidModel(tuple(cents), names, d)
