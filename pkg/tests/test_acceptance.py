"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line with its runtime and enforcing its runtime budget.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
lines as they complete.
"""

import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

import sketchlab.tinynn as tinynn
from sketchlab.cluster import KMeansConfig, fit_class_centroids, lloyd_fit, silhouette
from sketchlab.data import (
    EmbeddingSet,
    SampleMeta,
    clean_by_guess_rate,
    load_embedding_set,
    rebalance_classes,
    save_embedding_set,
)
from sketchlab.evaluate import top_n_accuracy
from sketchlab.knnpp import Prediction, VotingConfig, classify, classify_batch
from sketchlab.project import tsne2
from sketchlab.tinynn import (
    CnnConfig,
    TrainConfig,
    build_model,
    grad_check,
    kaiming_init,
    normalize_images,
    predict,
    select_checkpoint,
    train,
)


@contextmanager
def criterion(name, limit_s=None):
    started = time.monotonic()
    try:
        yield
    except Exception:
        print(f"FAIL: {name} ({time.monotonic() - started:.2f}s)")
        raise
    elapsed = time.monotonic() - started
    budget = f" < {limit_s:.0f}s" if limit_s else ""
    print(f"PASS: {name} ({elapsed:.2f}s{budget})")
    if limit_s is not None:
        assert elapsed < limit_s, f"{name} exceeded runtime budget: {elapsed:.2f}s"


# ---------------------------------------------------------------------------
# clustering


def test_silhouette_oracle_equivalence():
    with criterion("silhouette oracle equivalence (200 pts, d=8, 5 labels)", 5.0):
        rng = np.random.default_rng(815)
        pts = rng.standard_normal((200, 8))
        labels = rng.integers(0, 5, 200)
        report = silhouette(pts, labels)

        # independent brute-force double loop
        n = 200
        oracle = np.zeros(n)
        for i in range(n):
            same = [j for j in range(n) if labels[j] == labels[i] and j != i]
            a = np.mean([math.sqrt(((pts[i] - pts[j]) ** 2).sum()) for j in same])
            b = min(
                np.mean([math.sqrt(((pts[i] - pts[j]) ** 2).sum())
                         for j in range(n) if labels[j] == lab])
                for lab in set(labels.tolist()) if lab != labels[i]
            )
            oracle[i] = (b - a) / max(a, b)

        assert np.abs(report.per_point - oracle).max() < 1e-9
        assert abs(report.overall - oracle.mean()) < 1e-9


def test_lloyd_monotonicity():
    with criterion("Lloyd monotonicity + argmin consistency (100 instances)", 10.0):
        rng = np.random.default_rng(816)
        for _ in range(100):
            n = int(rng.integers(10, 200))
            d = int(rng.integers(1, 8))
            k = int(rng.integers(1, min(n, 10) + 1))
            pts = rng.standard_normal((n, d)) * float(rng.uniform(0.1, 10))
            res = lloyd_fit(pts, KMeansConfig(k=k, restarts=2, seed=int(rng.integers(1 << 31))))
            hist = np.array(res.inertia_history)
            assert (np.diff(hist) <= 1e-9 * np.maximum(hist[:-1], 1e-12)).all()
            d2 = ((pts[:, None, :] - res.centroids[None]) ** 2).sum(axis=2)
            np.testing.assert_array_equal(res.assignments, d2.argmin(axis=1))


def test_planted_cluster_recovery():
    with criterion("planted 3-blob recovery in >= 99/100 seeded runs", 20.0):
        hits = 0
        for seed in range(100):
            rng = np.random.default_rng(900 + seed)
            centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
            pts = np.concatenate([
                rng.normal(0, 0.1, (100, 2)) + c for c in centers
            ])
            res = lloyd_fit(pts, KMeansConfig(k=3, restarts=5, seed=seed))
            ok = all(
                min(math.sqrt(((c - t) ** 2).sum()) for t in centers) < 0.05
                for c in res.centroids
            )
            hits += ok
        assert hits >= 99, f"recovered in only {hits}/100 runs"


# ---------------------------------------------------------------------------
# voting classifier


def brute_force_rank(query, model, k_neighbors, epsilon):
    entries = []
    pooled = 0
    for class_id, cents in enumerate(model.centroids):
        for c in cents:
            dd = math.sqrt(sum((float(q) - float(v)) ** 2 for q, v in zip(query, c)))
            entries.append((dd, pooled, class_id))
            pooled += 1
    entries.sort(key=lambda t: (t[0], t[1]))
    scores = {}
    for dd, _, class_id in entries[:k_neighbors]:
        scores[class_id] = scores.get(class_id, 0.0) + 1.0 / math.sqrt(max(dd, epsilon))
    return sorted(scores.items(), key=lambda t: (-t[1], t[0]))


def test_knnpp_oracle_equivalence():
    with criterion("voting classifier vs full-sort oracle (100 queries, k in {1,3,5,9})", 5.0):
        rng = np.random.default_rng(817)
        from sketchlab.cluster import CentroidModel

        cents = tuple(rng.standard_normal((3, 6)).astype(np.float32) for _ in range(10))
        model = CentroidModel(cents, tuple(f"c{i}" for i in range(10)), 6)
        queries = rng.standard_normal((100, 6))
        for k in (1, 3, 5, 9):
            config = VotingConfig(k_neighbors=k)
            for q in queries:
                got = classify(q, model, config)
                want = brute_force_rank(q, model, k, config.epsilon)
                assert got.classes() == [c for c, _ in want]
                np.testing.assert_allclose(
                    [s for _, s in got.ranked], [s for _, s in want], rtol=1e-9
                )


# ---------------------------------------------------------------------------
# end-to-end pipeline


def planted_pipeline_points(rng, n_per_sub, d=12, num_classes=10):
    """10 far-apart class anchors, each with 3 sub-cluster sites."""
    rows, labels = [], []
    for c in range(num_classes):
        anchor = np.zeros(d)
        anchor[c] = 20.0
        offsets = [np.zeros(d), np.zeros(d), np.zeros(d)]
        offsets[1][10] = 5.0
        offsets[2][11] = 5.0
        for j in range(3):
            for _ in range(n_per_sub):
                rows.append(anchor + offsets[j] + rng.normal(0, 0.5, d))
                labels.append(c)
    return np.array(rows, dtype=np.float32), np.array(labels, dtype=np.uint32)


def test_end_to_end_pipeline():
    with criterion("end-to-end clean/rebalance/fit/classify/evaluate", 30.0):
        names = tuple(f"c{i}" for i in range(10))
        rng = np.random.default_rng(0)
        data, labels = planted_pipeline_points(rng, 20)  # 60 per class
        rates = rng.uniform(0.4, 1.0, size=len(labels))
        rates[rng.choice(len(labels), size=15, replace=False)] = 0.01
        es = EmbeddingSet(data, labels, names)
        metas = [SampleMeta(str(i), int(labels[i]), float(rates[i])) for i in range(es.n)]

        cleaned = clean_by_guess_rate(es, metas, 0.1)
        assert cleaned.n == es.n - 15
        balanced = rebalance_classes(cleaned, seed=0)
        assert len(set(balanced.class_counts().tolist())) == 1
        model = fit_class_centroids(balanced, 3, KMeansConfig(k=3, restarts=5, seed=0))
        preds = classify_batch(balanced, model, VotingConfig(k_neighbors=9))
        assert top_n_accuracy(preds, balanced.labels, 1) >= 0.95
        assert top_n_accuracy(preds, balanced.labels, 5) >= 0.99

        # shuffled-label control: chance-level accuracy on held-out queries,
        # averaged over 20 reshuffles (a single shuffle has only 30
        # sub-cluster sites' worth of independent outcomes)
        q_data, q_labels = planted_pipeline_points(rng, 10)
        queries = EmbeddingSet(q_data, q_labels, names)
        accs = []
        for r in range(20):
            shuffled = EmbeddingSet(balanced.data, rng.permutation(balanced.labels), names)
            smodel = fit_class_centroids(shuffled, 3, KMeansConfig(k=3, restarts=5, seed=r))
            spreds = classify_batch(queries, smodel, VotingConfig(k_neighbors=9))
            accs.append(top_n_accuracy(spreds, queries.labels, 1))
        control = float(np.mean(accs))
        assert 0.05 <= control <= 0.15, f"shuffled-label control {control:.4f} outside 0.10 +- 0.05"


# ---------------------------------------------------------------------------
# evaluation


def test_top_n_exactness():
    with criterion("top-N accuracy vs brute-force counting (1000 lists)"):
        rng = np.random.default_rng(818)
        C = 12
        preds, labels = [], []
        for _ in range(1000):
            length = int(rng.integers(0, C + 1))
            ranked = rng.permutation(C)[:length]
            preds.append(Prediction(ranked=tuple(
                (int(c), float(length - i)) for i, c in enumerate(ranked))))
            labels.append(int(rng.integers(0, C)))
        prev = 0.0
        for n in range(1, C + 1):
            got = top_n_accuracy(preds, labels, n)
            want = sum(1 for p, y in zip(preds, labels) if y in p.classes()[:n]) / 1000
            assert got == want
            assert got >= prev
            prev = got


# ---------------------------------------------------------------------------
# CNN


TINY = CnnConfig(num_classes=3, in_channels=3, base_filters=2, num_blocks=3, input_hw=(8, 8))


def test_gradient_verification():
    with criterion("finite-difference gradient verification + mutant control", 30.0):
        model = build_model(TINY, seed=4, dtype=np.float64)
        rng = np.random.default_rng(4)
        x = rng.standard_normal((4, 3, 8, 8))
        labels = rng.integers(0, 3, size=4)
        report = grad_check(model, x, labels, h=1e-5, tolerance=1e-4)
        assert report.passed, f"max rel error {report.max_rel_error:.3e}"

        # sign-flipped conv backward must fail the same check
        real = tinynn.conv2d_backward
        try:
            tinynn.conv2d_backward = lambda xx, ww, dy: (
                real(xx, ww, dy)[0], -real(xx, ww, dy)[1], real(xx, ww, dy)[2]
            )
            mutant = grad_check(model, x, labels, h=1e-5, tolerance=1e-4)
        finally:
            tinynn.conv2d_backward = real
        assert not mutant.passed, "sign-flipped backward must fail the gradient check"


def colored_shapes(n_per_class, hw=16, seed=0):
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for cls in range(4):
        for _ in range(n_per_class):
            img = np.zeros((3, hw, hw))
            channel = cls % 3
            r0, c0 = rng.integers(2, hw - 8, size=2)
            if cls < 2:
                img[channel, r0:r0 + 6, c0:c0 + 6] = 1.0       # square
            else:
                for i in range(6):
                    img[channel, r0 + i, c0:c0 + i + 1] = 1.0  # triangle
            img += rng.normal(0, 0.02, img.shape)
            images.append(np.clip(img, 0, 1) * 255)
            labels.append(cls)
    return np.stack(images).astype(np.uint8), np.array(labels, dtype=np.uint32)


def test_training_sanity():
    with criterion("training reaches 100% train accuracy at lr 1e-4 / batch 16", 60.0):
        images, labels = colored_shapes(64)
        x = normalize_images(images)
        cfg = CnnConfig(num_classes=4, base_filters=4, num_blocks=2, input_hw=(16, 16))
        model = build_model(cfg, seed=0)
        tc = TrainConfig(learning_rate=1e-4, batch_size=16, epochs=200, seed=0)
        train(model, x, labels, x[:16], labels[:16], tc)
        acc = float((predict(model, x) == labels).mean())
        assert acc == 1.0, f"train accuracy {acc:.4f}"

        # checkpoint selection: argmin of a scripted loss sequence
        assert select_checkpoint([0.9, 0.7, 0.8]) == 2
        assert select_checkpoint([0.4, 0.2, 0.2, 0.9]) == 2  # tie -> earliest


def test_kaiming_statistics():
    with criterion("He-init statistics over 1e6 draws at fan_in=100"):
        draws = kaiming_init(100, (1_000_000,), seed=12)
        assert abs(draws.var() - 0.02) < 0.05 * 0.02
        assert abs(draws.mean()) < 1e-3


# ---------------------------------------------------------------------------
# t-SNE


def tsne_blob_set(rng, per_blob=100, d=8, duplicate=False):
    centers = np.zeros((3, d))
    centers[1, 0] = 30.0
    centers[2, 1] = 30.0
    rows, labels = [], []
    for c in range(3):
        rows.append(rng.normal(0, 1.0, (per_blob, d)) + centers[c])
        labels += [c] * per_blob
    data = np.concatenate(rows).astype(np.float32)
    if duplicate:
        data[1] = data[0]
    return EmbeddingSet(data, np.array(labels, dtype=np.uint32), ("a", "b", "c"))


def test_tsne_contract():
    with criterion("t-SNE: KL descent 10/10 seeds, duplicates, calibration", 60.0):
        rng = np.random.default_rng(819)
        es = tsne_blob_set(rng)
        for seed in range(10):
            proj = tsne2(es, perplexity=30.0, iters=300, seed=seed)
            assert proj.objective < proj.meta["kl_initial"]
            assert proj.meta["calibration_failures"] == 0
            assert proj.meta["achieved_perplexity_max_error"] < 1e-3

        dup = tsne_blob_set(np.random.default_rng(820), duplicate=True)
        proj = tsne2(dup, perplexity=30.0, iters=1000, seed=0)
        dists = np.sqrt(((proj.coords[:, None] - proj.coords[None]) ** 2).sum(-1))
        pair = dists[0, 1]
        upper = dists[np.triu_indices(dup.n, k=1)]
        assert pair <= np.percentile(upper, 1), (
            f"duplicate pair distance {pair:.4f} above 1st percentile"
        )


# ---------------------------------------------------------------------------
# format


def test_format_round_trip(tmp_path):
    with criterion("embedding-set save/load byte round-trip (100 random sets)"):
        rng = np.random.default_rng(821)
        for i in range(100):
            n = int(rng.integers(1, 50))
            d = int(rng.integers(1, 16))
            c = int(rng.integers(1, 8))
            es = EmbeddingSet(
                rng.standard_normal((n, d)).astype(np.float32),
                rng.integers(0, c, n).astype(np.uint32),
                tuple(f"c{j}" for j in range(c)),
            )
            save_embedding_set(es, tmp_path / f"s{i}")
            back = load_embedding_set(tmp_path / f"s{i}")
            assert back.data.tobytes() == es.data.tobytes()
            assert back.labels.tobytes() == es.labels.tobytes()
            assert back.label_names == es.label_names
