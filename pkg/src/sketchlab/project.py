"""2-D projection of embedding sets for cluster-structure inspection.

``pca2`` projects onto the top two principal components and doubles as the
initializer for ``tsne2``, an exact (O(n^2)) t-SNE with per-point perplexity
calibration by bisection, early exaggeration, and momentum gradient descent.
Sets larger than ``TSNE_MAX_POINTS`` are subsampled (seeded) instead of
falling back to tree approximations; the selected row indices are reported.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import EmbeddingSet, _freeze

TSNE_MAX_POINTS = 5000

DEFAULT_PERPLEXITY = 30.0
DEFAULT_TSNE_ITERS = 1000
EARLY_EXAGGERATION = 12.0
EXAGGERATION_ITERS = 250
TSNE_LEARNING_RATE = 200.0
MOMENTUM_EARLY = 0.5
MOMENTUM_LATE = 0.8
INIT_STD = 1e-4


@dataclass(frozen=True)
class Projection2D:
    """n x 2 coordinates with labels, the method tag, and its objective.

    ``objective`` is the final KL divergence for t-SNE and the explained
    variance fraction for PCA. ``meta`` carries method-specific diagnostics
    (eigenvalues, KL curve, calibration stats, subsample indices).
    """

    coords: np.ndarray
    labels: np.ndarray
    method: str
    objective: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"coords must be (n, 2), got {coords.shape}")
        if not np.isfinite(coords).all():
            raise ValueError("projection contains non-finite coordinates")
        labels = np.asarray(self.labels)
        if labels.shape != (coords.shape[0],):
            raise ValueError("labels do not match projected points")
        object.__setattr__(self, "coords", _freeze(coords))
        object.__setattr__(self, "labels", _freeze(labels.copy()))


def pca2(es: EmbeddingSet) -> Projection2D:
    """Project onto the top two principal components of the centered data.

    Component signs follow a fixed convention (the largest-magnitude loading
    is positive). Rank-deficient inputs emit zeros for the missing component
    and set ``meta["degenerate"]``.
    """
    if es.n < 3:
        raise ValueError(f"need at least 3 rows, got {es.n}")
    if es.d < 2:
        raise ValueError(f"need dimension >= 2, got {es.d}")
    X = es.data.astype(np.float64)
    Xc = X - X.mean(axis=0)
    _, svals, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = vt[:2].copy()
    for row in comps:
        j = int(np.abs(row).argmax())
        if row[j] < 0:
            row *= -1.0
    coords = Xc @ comps.T
    total = float((svals ** 2).sum())
    degenerate = total == 0.0 or svals[1] <= svals[0] * 1e-12
    if degenerate:
        coords[:, 1] = 0.0
    explained = float((svals[:2] ** 2).sum() / total) if total > 0 else 0.0
    return Projection2D(
        coords=coords,
        labels=es.labels,
        method="pca",
        objective=explained,
        meta={
            "singular_values": tuple(float(s) for s in svals[:2]),
            "eigenvalues": tuple(float(s * s / max(es.n - 1, 1)) for s in svals[:2]),
            "degenerate": bool(degenerate),
        },
    )


# ---------------------------------------------------------------------------
# t-SNE


def _pairwise_sq_dists(X: np.ndarray) -> np.ndarray:
    sq = (X ** 2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def _calibrate_row(d2_row: np.ndarray, perplexity: float, tol: float = 1e-6, max_iter: int = 200):
    """Bisection on the Gaussian precision so exp(entropy) hits perplexity.

    Distances are shifted by the row minimum before exponentiating (entropy
    is shift-invariant) so the normalizer never underflows to zero.
    Returns (probabilities, achieved perplexity, converged flag).
    """
    shifted = d2_row - d2_row.min()
    beta, lo, hi = 1.0, 0.0, np.inf
    p = np.zeros_like(d2_row)
    achieved = np.inf
    for _ in range(max_iter):
        p = np.exp(-shifted * beta)
        p /= p.sum()
        nz = p > 0
        entropy = float(-(p[nz] * np.log(p[nz])).sum())
        achieved = float(np.exp(entropy))
        diff = achieved - perplexity
        if abs(diff) <= tol:
            return p, achieved, True
        if diff > 0:         # too many effective neighbors: sharpen
            lo = beta
            beta = beta * 2.0 if np.isinf(hi) else (beta + hi) / 2.0
        else:
            hi = beta
            beta = beta / 2.0 if lo == 0.0 else (beta + lo) / 2.0
    return p, achieved, False


def _conditional_p(d2: np.ndarray, perplexity: float):
    n = d2.shape[0]
    P = np.zeros((n, n))
    achieved = np.zeros(n)
    converged = np.zeros(n, dtype=bool)
    others = ~np.eye(n, dtype=bool)
    for i in range(n):
        row, achieved[i], converged[i] = _calibrate_row(d2[i][others[i]], perplexity)
        P[i][others[i]] = row
    row_sums = P.sum(axis=1)
    if not np.allclose(row_sums, 1.0, atol=1e-6):
        raise AssertionError("conditional probabilities failed to normalize")
    return P, achieved, converged


def _kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    num = 1.0 / (1.0 + _pairwise_sq_dists(Y))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-12)
    mask = P > 0
    return float((P[mask] * np.log(P[mask] / Q[mask])).sum())


def tsne2(
    es: EmbeddingSet,
    perplexity: float = DEFAULT_PERPLEXITY,
    iters: int = DEFAULT_TSNE_ITERS,
    seed: int = 0,
) -> Projection2D:
    """Exact t-SNE to 2-D with PCA initialization.

    Gaussian bandwidths are calibrated per point by bisection; points whose
    bisection does not converge (degenerate distance patterns) are counted
    in ``meta["calibration_failures"]`` rather than raising. The optimizer
    is plain gradient descent with per-element gains, momentum 0.5 rising to
    0.8, and x12 early exaggeration for the first 250 iterations. ``meta``
    records the KL divergence before and during descent; ``objective`` is
    the final KL.
    """
    if perplexity <= 0:
        raise ValueError(f"perplexity must be > 0, got {perplexity}")
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    if es.n < 3:
        raise ValueError(f"need at least 3 rows, got {es.n}")
    if es.n < 3 * perplexity:
        raise ValueError(f"perplexity {perplexity} infeasible for n={es.n} (need n >= 3*perplexity)")

    rng = np.random.default_rng(seed)
    if es.n > TSNE_MAX_POINTS:
        indices = np.sort(rng.choice(es.n, size=TSNE_MAX_POINTS, replace=False))
        work = es.take(indices)
    else:
        indices = np.arange(es.n)
        work = es
    n = work.n

    X = work.data.astype(np.float64)
    d2 = _pairwise_sq_dists(X)
    cond, achieved, converged = _conditional_p(d2, perplexity)
    P = (cond + cond.T) / (2.0 * n)
    P = np.maximum(P, 1e-12)

    init = pca2(work).coords.copy()
    spread = init[:, 0].std()
    if spread > 0:
        Y = init * (INIT_STD / spread)
    else:
        Y = rng.normal(0.0, INIT_STD, size=(n, 2))

    kl_initial = _kl_divergence(P, Y)
    kl_curve = [(0, kl_initial)]
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)
    for it in range(iters):
        exaggerate = it < EXAGGERATION_ITERS
        momentum = MOMENTUM_EARLY if it < EXAGGERATION_ITERS else MOMENTUM_LATE
        P_eff = P * EARLY_EXAGGERATION if exaggerate else P

        num = 1.0 / (1.0 + _pairwise_sq_dists(Y))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        W = (P_eff - Q) * num
        grad = 4.0 * (Y * W.sum(axis=1)[:, None] - W @ Y)

        flipped = np.sign(grad) != np.sign(velocity)
        gains = np.where(flipped, gains + 0.2, gains * 0.8)
        np.maximum(gains, 0.01, out=gains)
        velocity = momentum * velocity - TSNE_LEARNING_RATE * (gains * grad)
        Y = Y + velocity
        Y = Y - Y.mean(axis=0)
        if (it + 1) % 50 == 0:
            kl_curve.append((it + 1, _kl_divergence(P, Y)))

    kl_final = _kl_divergence(P, Y)
    return Projection2D(
        coords=Y,
        labels=work.labels,
        method="tsne",
        objective=kl_final,
        meta={
            "kl_initial": kl_initial,
            "kl_final": kl_final,
            "kl_curve": tuple(kl_curve),
            "perplexity": perplexity,
            "achieved_perplexity_max_error": float(np.abs(achieved[converged] - perplexity).max())
            if converged.any() else float("inf"),
            "calibration_failures": int((~converged).sum()),
            "subsampled": bool(n < es.n),
            "indices": tuple(int(i) for i in indices),
        },
    )


def write_projection_csv(proj: Projection2D, label_names, path) -> None:
    """Emit ``x,y,label_id,label_name`` rows, one per projected point."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y", "label_id", "label_name"])
        for (x, y), lab in zip(proj.coords, proj.labels):
            writer.writerow([repr(float(x)), repr(float(y)), int(lab), label_names[int(lab)]])
