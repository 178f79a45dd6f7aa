"""Embedding-set data model: on-disk format, cleaning, rebalancing, splitting.

An embedding set is a directory with three files:

* ``meta.json``       -- ``{"version": 1, "n": <int>, "d": <int>, "label_names": [...]}``
* ``embeddings.f32``  -- n*d IEEE-754 binary32 values, little-endian, row-major, no header
* ``labels.u32``      -- n unsigned 32-bit little-endian integers

An optional ``meta_samples.csv`` (header ``sample_id,label_id,guess_rate``,
RFC-4180 quoting) carries per-sample provenance used for quality filtering.

All randomness in this module goes through ``numpy.random.default_rng``
(PCG64), so results are reproducible across platforms for a fixed seed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

META_FILE = "meta.json"
EMBEDDINGS_FILE = "embeddings.f32"
LABELS_FILE = "labels.u32"
SAMPLE_META_FILE = "meta_samples.csv"

DEFAULT_CLEAN_THRESHOLD = 0.1
DEFAULT_HISTOGRAM_BINS = 10


class DatasetFormatError(Exception):
    """An on-disk embedding set violates the format contract."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SampleMeta:
    """Provenance for one sample: id, class, and fraction of correct guesses."""

    sample_id: str
    label_id: int
    guess_rate: float

    def __post_init__(self):
        if self.label_id < 0:
            raise ValueError(f"label_id must be >= 0, got {self.label_id}")
        if not (0.0 <= self.guess_rate <= 1.0):
            raise ValueError(f"guess_rate must be in [0, 1], got {self.guess_rate}")


@dataclass(frozen=True)
class EmbeddingSet:
    """n rows of d-dimensional embeddings with integer class labels.

    ``data`` is an (n, d) float32 matrix, ``labels`` an (n,) uint32 vector.
    Instances are immutable after construction (backing arrays are marked
    read-only) and safe for concurrent reads.
    """

    data: np.ndarray
    labels: np.ndarray
    label_names: tuple[str, ...]

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        if data.ndim != 2:
            raise ValueError(f"data must be 2-D, got shape {data.shape}")
        if labels.shape != (data.shape[0],):
            raise ValueError(
                f"labels shape {labels.shape} does not match {data.shape[0]} rows"
            )
        if not np.isfinite(data).all():
            raise ValueError("embedding matrix contains non-finite values")
        names = tuple(str(s) for s in self.label_names)
        if labels.size and int(labels.max()) >= len(names):
            raise ValueError(
                f"label {int(labels.max())} out of range for {len(names)} label names"
            )
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "labels", _freeze(labels))
        object.__setattr__(self, "label_names", names)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes).astype(np.int64)

    def take(self, indices) -> "EmbeddingSet":
        """New set with the given rows, in the given order."""
        idx = np.asarray(indices, dtype=np.int64)
        return EmbeddingSet(self.data[idx], self.labels[idx], self.label_names)


@dataclass(frozen=True)
class ClassHistogram:
    """Per-class sample counts plus a fixed-width histogram of those counts."""

    counts: np.ndarray       # (C,) samples per class
    bin_edges: np.ndarray    # (bins + 1,) uniform over [min count, max count]
    bin_counts: np.ndarray   # (bins,) classes per bin; sums to C

    def __post_init__(self):
        object.__setattr__(self, "counts", _freeze(np.asarray(self.counts, dtype=np.int64)))
        object.__setattr__(self, "bin_edges", _freeze(np.asarray(self.bin_edges, dtype=np.float64)))
        object.__setattr__(self, "bin_counts", _freeze(np.asarray(self.bin_counts, dtype=np.int64)))


@dataclass(frozen=True)
class SplitSpec:
    """Train/val/test fractions (must sum to 1) and the shuffle seed."""

    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0 for f in fracs):
            raise ValueError(f"all split fractions must be > 0, got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-12:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)!r}")


# ---------------------------------------------------------------------------
# on-disk format


def save_embedding_set(es: EmbeddingSet, path) -> None:
    """Write ``meta.json`` / ``embeddings.f32`` / ``labels.u32`` under ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": FORMAT_VERSION,
        "n": es.n,
        "d": es.d,
        "label_names": list(es.label_names),
    }
    (root / META_FILE).write_text(json.dumps(meta), encoding="utf-8")
    (root / EMBEDDINGS_FILE).write_bytes(es.data.astype("<f4").tobytes())
    (root / LABELS_FILE).write_bytes(es.labels.astype("<u4").tobytes())


def load_embedding_set(path) -> EmbeddingSet:
    """Load an embedding-set directory, validating every format invariant."""
    root = Path(path)
    meta_path = root / META_FILE
    if not meta_path.is_file():
        raise DatasetFormatError(f"missing {META_FILE} in {root}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"invalid JSON in {meta_path}: {exc}") from exc
    for key in ("version", "n", "d", "label_names"):
        if key not in meta:
            raise DatasetFormatError(f"{META_FILE} missing key {key!r}")
    if meta["version"] != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format version {meta['version']!r}")
    n, d = int(meta["n"]), int(meta["d"])
    if n < 0 or d < 1:
        raise DatasetFormatError(f"invalid dimensions n={n}, d={d}")

    emb_path = root / EMBEDDINGS_FILE
    lab_path = root / LABELS_FILE
    if not emb_path.is_file():
        raise DatasetFormatError(f"missing {EMBEDDINGS_FILE} in {root}")
    if not lab_path.is_file():
        raise DatasetFormatError(f"missing {LABELS_FILE} in {root}")

    raw = emb_path.read_bytes()
    if len(raw) != n * d * 4:
        raise DatasetFormatError(
            f"{EMBEDDINGS_FILE} holds {len(raw)} bytes, expected {n * d * 4} for n={n}, d={d}"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(n, d)

    raw = lab_path.read_bytes()
    if len(raw) != n * 4:
        raise DatasetFormatError(
            f"{LABELS_FILE} holds {len(raw)} bytes, expected {n * 4} for n={n}"
        )
    labels = np.frombuffer(raw, dtype="<u4")

    if not np.isfinite(data).all():
        raise DatasetFormatError(f"{EMBEDDINGS_FILE} contains non-finite values")
    names = [str(s) for s in meta["label_names"]]
    if labels.size and int(labels.max()) >= len(names):
        raise DatasetFormatError(
            f"label {int(labels.max())} out of range for {len(names)} label names"
        )
    return EmbeddingSet(data, labels, tuple(names))


def save_sample_metas(metas: list[SampleMeta], path) -> None:
    """Write ``meta_samples.csv`` (RFC-4180; repr-exact guess rates)."""
    target = Path(path)
    if target.is_dir():
        target = target / SAMPLE_META_FILE
    with open(target, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "label_id", "guess_rate"])
        for m in metas:
            writer.writerow([m.sample_id, m.label_id, repr(m.guess_rate)])


def load_sample_metas(path) -> list[SampleMeta]:
    """Read ``meta_samples.csv`` from a file path or a set directory."""
    target = Path(path)
    if target.is_dir():
        target = target / SAMPLE_META_FILE
    if not target.is_file():
        raise DatasetFormatError(f"missing sample metadata file {target}")
    metas = []
    with open(target, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["sample_id", "label_id", "guess_rate"]:
            raise DatasetFormatError(f"unexpected sample-meta header {header!r}")
        for row in reader:
            if len(row) != 3:
                raise DatasetFormatError(f"malformed sample-meta row {row!r}")
            metas.append(SampleMeta(row[0], int(row[1]), float(row[2])))
    return metas


def load_embedding_csv(path) -> EmbeddingSet:
    """Load a small plain-CSV fixture with header ``label,<d feature columns>``.

    The label column may hold integer class ids (label names are synthesized
    as ``class_<i>``) or name strings (ids assigned by sorted name order).
    """
    target = Path(path)
    if not target.is_file():
        raise DatasetFormatError(f"missing CSV file {target}")
    with open(target, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "label" or len(header) < 2:
            raise DatasetFormatError(f"expected header 'label,<features>', got {header!r}")
        d = len(header) - 1
        raw_labels: list[str] = []
        rows: list[list[float]] = []
        for row in reader:
            if len(row) != d + 1:
                raise DatasetFormatError(f"row has {len(row)} fields, expected {d + 1}")
            raw_labels.append(row[0])
            rows.append([float(v) for v in row[1:]])
    if not rows:
        raise DatasetFormatError(f"CSV {target} has no data rows")
    try:
        ids = [int(s) for s in raw_labels]
        if min(ids) < 0:
            raise DatasetFormatError("negative label id in CSV")
        names = tuple(f"class_{i}" for i in range(max(ids) + 1))
    except ValueError:
        names = tuple(sorted(set(raw_labels)))
        index = {name: i for i, name in enumerate(names)}
        ids = [index[s] for s in raw_labels]
    return EmbeddingSet(np.array(rows, dtype=np.float32), np.array(ids, dtype=np.uint32), names)


def load_any(path) -> EmbeddingSet:
    """Load either a set directory or a plain-CSV fixture, by path type."""
    p = Path(path)
    if p.is_dir():
        return load_embedding_set(p)
    if p.suffix == ".csv":
        return load_embedding_csv(p)
    raise DatasetFormatError(f"{p} is neither a set directory nor a .csv file")


# ---------------------------------------------------------------------------
# operations


def clean_by_guess_rate(
    es: EmbeddingSet, metas: list[SampleMeta], threshold: float = DEFAULT_CLEAN_THRESHOLD
) -> EmbeddingSet:
    """Keep rows whose guess rate is >= threshold, preserving order.

    The correct-guess fraction collected alongside each drawing is a cheap
    quality signal: unrecognizable or junk samples sit near zero.
    """
    if len(metas) != es.n:
        raise ValueError(f"{len(metas)} sample metas for {es.n} rows")
    if not (0.0 <= threshold <= 1.0):
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    keep = [i for i, m in enumerate(metas) if m.guess_rate >= threshold]
    return es.take(keep)


def rebalance_classes(es: EmbeddingSet, seed: int = 0) -> EmbeddingSet:
    """Up-sample every class to the maximum class count.

    Added rows are copies of existing same-class rows drawn uniformly with
    replacement; the original rows are kept unchanged (and first), so an
    already balanced set passes through untouched. Deterministic per seed.
    """
    counts = es.class_counts()
    if (counts == 0).any():
        empty = int(np.argmin(counts))
        raise ValueError(f"class {empty} ({es.label_names[empty]}) has no samples")
    target = int(counts.max())
    rng = np.random.default_rng(seed)
    extra: list[np.ndarray] = []
    for c in range(es.num_classes):
        deficit = target - int(counts[c])
        if deficit == 0:
            continue
        rows = np.flatnonzero(es.labels == c)
        extra.append(rows[rng.integers(0, rows.size, size=deficit)])
    if not extra:
        return es
    idx = np.concatenate([np.arange(es.n, dtype=np.int64)] + extra)
    return es.take(idx)


def _largest_remainder(targets: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation summing to ``total``, each within 1 of its target.

    Floors first, then hands out the leftover by descending fractional part
    (ties -> lowest index).
    """
    base = np.floor(targets).astype(np.int64)
    leftover = total - int(base.sum())
    if leftover:
        frac = targets - base
        order = sorted(range(len(targets)), key=lambda i: (-frac[i], i))
        for i in order[:leftover]:
            base[i] += 1
    return base


def split(es: EmbeddingSet, spec: SplitSpec) -> tuple[EmbeddingSet, EmbeddingSet, EmbeddingSet]:
    """Stratified, seeded train/val/test partition.

    Global split sizes are within 1 of ``n * frac``; per-class allocations
    are within 1 of that class's share of each split. Rows are never lost or
    duplicated, and each output preserves the input's row order.
    """
    if es.n < 3:
        raise ValueError(f"need at least 3 rows to split, got {es.n}")
    fracs = np.array([spec.train_frac, spec.val_frac, spec.test_frac])
    global_sizes = _largest_remainder(es.n * fracs, es.n)
    if (global_sizes == 0).any():
        which = ("train", "val", "test")[int(np.argmin(global_sizes))]
        raise ValueError(f"{which} split receives 0 rows for n={es.n}, fracs={tuple(fracs)}")

    counts = es.class_counts()
    present = np.flatnonzero(counts)
    achieved = global_sizes / es.n
    # Per-class allocation against the achieved global fractions, then a
    # donor/receiver repair so the three column sums land exactly on the
    # global sizes. Each move takes from the most over-allocated cell and
    # gives to the most under-allocated one, so cells stay within one row
    # of their proportional share.
    targets = counts[present, None] * achieved[None, :]
    alloc = np.stack([_largest_remainder(targets[i], int(counts[present[i]])) for i in range(len(present))])
    col_err = alloc.sum(axis=0) - global_sizes
    while col_err.any():
        donor = int(np.argmax(col_err))
        receiver = int(np.argmin(col_err))
        dev = alloc - targets
        score = dev[:, donor] - dev[:, receiver]
        score[alloc[:, donor] == 0] = -np.inf
        row = int(np.argmax(score))
        alloc[row, donor] -= 1
        alloc[row, receiver] += 1
        col_err[donor] -= 1
        col_err[receiver] += 1

    rng = np.random.default_rng(spec.seed)
    parts: tuple[list[int], list[int], list[int]] = ([], [], [])
    for i, c in enumerate(present):
        rows = np.flatnonzero(es.labels == c)
        rng.shuffle(rows)
        n_tr, n_va = int(alloc[i, 0]), int(alloc[i, 1])
        parts[0].extend(rows[:n_tr].tolist())
        parts[1].extend(rows[n_tr:n_tr + n_va].tolist())
        parts[2].extend(rows[n_tr + n_va:].tolist())
    return tuple(es.take(sorted(p)) for p in parts)  # type: ignore[return-value]


def class_histogram(es: EmbeddingSet, bins: int = DEFAULT_HISTOGRAM_BINS) -> ClassHistogram:
    """Per-class counts plus a histogram of class sizes over uniform bins."""
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    counts = es.class_counts()
    lo, hi = float(counts.min()), float(counts.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5  # degenerate range: one common class size
    edges = np.linspace(lo, hi, bins + 1)
    bin_counts, _ = np.histogram(counts, bins=edges)
    return ClassHistogram(counts=counts, bin_edges=edges, bin_counts=bin_counts)


def write_histogram_csv(hist: ClassHistogram, path) -> None:
    """Emit ``bin_low,bin_high,class_count`` rows for external plotting."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_low", "bin_high", "class_count"])
        for i, count in enumerate(hist.bin_counts):
            writer.writerow([repr(float(hist.bin_edges[i])), repr(float(hist.bin_edges[i + 1])), int(count)])
