import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sketchlab.evaluate import (
    ConfusionMatrix,
    accuracy_report,
    confusion_matrix,
    ema_smooth,
    most_confused,
    top_n_accuracy,
    write_accuracy_json,
    write_confusion_csv,
)
from sketchlab.knnpp import Prediction


def pred(*classes):
    return Prediction(ranked=tuple((c, float(len(classes) - i)) for i, c in enumerate(classes)))


class TestTopN:
    def test_half_right(self):
        preds = [pred(0, 1), pred(1, 2)]
        assert top_n_accuracy(preds, [0, 3], 2) == 0.5

    def test_perfect_top1(self):
        preds = [pred(2, 0), pred(1, 0), pred(0, 1)]
        assert top_n_accuracy(preds, [2, 1, 0], 1) == 1.0

    def test_uniform_random_rate(self):
        # uniform-random rankings over 170 classes: top-5 hit rate ~ 5/170
        rng = np.random.default_rng(89)
        n, C = 100_000, 170
        positions = rng.integers(0, C, size=n)  # position of the true label
        hits = (positions < 5).mean()
        assert hits == pytest.approx(5 / 170, abs=0.002)
        # spot-check equivalence with the real implementation on a slice
        perms = [rng.permutation(C) for _ in range(300)]
        preds = [Prediction(ranked=tuple((int(c), float(C - i)) for i, c in enumerate(p)))
                 for p in perms]
        labels = [int(p[rng.integers(0, C)]) for p in perms]
        got = top_n_accuracy(preds, labels, 5)
        want = sum(1 for p, y in zip(perms, labels) if y in p[:5].tolist()) / len(perms)
        assert got == want

    def test_matches_brute_force_counting(self):
        rng = np.random.default_rng(97)
        for _ in range(30):
            C = int(rng.integers(2, 12))
            n = int(rng.integers(1, 50))
            preds = []
            labels = []
            for _ in range(n):
                length = int(rng.integers(0, C + 1))
                ranked = rng.permutation(C)[:length]
                preds.append(Prediction(ranked=tuple((int(c), float(length - i))
                                                     for i, c in enumerate(ranked))))
                labels.append(int(rng.integers(0, C)))
            for topn in (1, 3, C + 2):
                want = sum(1 for p, y in zip(preds, labels) if y in p.classes()[:topn]) / n
                assert top_n_accuracy(preds, labels, topn) == want

    @given(st.integers(min_value=1, max_value=8), st.integers(min_value=2, max_value=60))
    @settings(max_examples=40, deadline=None)
    def test_monotone_in_n(self, seed, n):
        rng = np.random.default_rng(seed)
        C = 9
        preds = [Prediction(ranked=tuple((int(c), float(C - i))
                                         for i, c in enumerate(rng.permutation(C))))
                 for _ in range(n)]
        labels = rng.integers(0, C, size=n)
        accs = [top_n_accuracy(preds, labels, k) for k in range(1, C + 1)]
        assert accs == sorted(accs)
        assert accs[-1] == 1.0  # n >= C with full rankings

    def test_errors(self):
        with pytest.raises(ValueError, match="empty"):
            top_n_accuracy([], [], 1)
        with pytest.raises(ValueError, match="labels"):
            top_n_accuracy([pred(0)], [0, 1], 1)
        with pytest.raises(ValueError, match=">= 1"):
            top_n_accuracy([pred(0)], [0], 0)


class TestConfusion:
    def test_perfect_diagonal(self):
        preds = [pred(0), pred(1), pred(1), pred(2)]
        cm = confusion_matrix(preds, [0, 1, 1, 2], 3)
        assert cm.counts[:, :3].tolist() == [[1, 0, 0], [0, 2, 0], [0, 0, 1]]
        assert cm.supports().tolist() == [1, 2, 1]

    def test_single_off_diagonal(self):
        cm = confusion_matrix([pred(1)], [0], 2)
        assert cm.counts[0, 1] == 1
        assert cm.counts.sum() == 1

    def test_abstain_column(self):
        preds = [Prediction(ranked=()), pred(0)]
        cm = confusion_matrix(preds, [1, 0], 2)
        assert cm.counts[1, 2] == 1  # abstain column
        assert cm.supports().tolist() == [1, 1]

    def test_matches_tally_oracle(self):
        rng = np.random.default_rng(101)
        C, n = 6, 200
        preds = [pred(int(rng.integers(0, C))) for _ in range(n)]
        labels = rng.integers(0, C, size=n)
        cm = confusion_matrix(preds, labels, C)
        tally = np.zeros((C, C + 1), dtype=int)
        for p, y in zip(preds, labels):
            tally[y, p.top1()] += 1
        np.testing.assert_array_equal(cm.counts, tally)
        assert cm.counts.sum() == n

    def test_out_of_range_label(self):
        with pytest.raises(ValueError, match="out of range"):
            confusion_matrix([pred(0)], [5], 2)


class TestMostConfused:
    def test_diagonal_ties_by_id(self):
        cm = confusion_matrix([pred(0), pred(1), pred(2)], [0, 1, 2], 3)
        assert most_confused(cm, 2) == [0, 1]

    def test_fully_misclassified_first(self):
        preds = [pred(1), pred(1), pred(2), pred(0)]
        cm = confusion_matrix(preds, [0, 1, 2, 0], 3)
        # class 0: 1/2 recall; class 1: 1; class 2: 1 -> but make class 2 zero
        preds = [pred(1), pred(1), pred(0), pred(0)]
        cm = confusion_matrix(preds, [2, 1, 2, 0], 3)
        assert most_confused(cm, 1) == [2]

    def test_matches_recall_sort_oracle(self):
        rng = np.random.default_rng(103)
        C = 8
        counts = rng.integers(0, 20, size=(C, C + 1))
        counts[3] = 0  # zero-support row must be excluded
        cm = ConfusionMatrix(counts=counts, label_names=tuple(f"c{i}" for i in range(C)))
        got = most_confused(cm, 5)
        recalls = []
        for c in range(C):
            row = counts[c].sum()
            if row > 0:
                recalls.append((counts[c, c] / row, c))
        recalls.sort()
        assert got == [c for _, c in recalls[:5]]

    def test_all_zero_support_rejected(self):
        cm = ConfusionMatrix(counts=np.zeros((3, 4), dtype=int), label_names=("a", "b", "c"))
        with pytest.raises(ValueError, match="zero support"):
            most_confused(cm, 2)


class TestEma:
    def test_alpha_zero_identity(self):
        x = [3.0, 1.0, 4.0, 1.5]
        np.testing.assert_array_equal(ema_smooth(x, 0.0), x)

    def test_constant_series_unchanged(self):
        np.testing.assert_allclose(ema_smooth([2.5] * 10, 0.9), [2.5] * 10)

    def test_one_step(self):
        np.testing.assert_allclose(ema_smooth([0.0, 1.0], 0.9), [0.0, 0.1])

    def test_same_length(self):
        assert ema_smooth(np.arange(17.0), 0.5).shape == (17,)

    @given(st.lists(st.floats(min_value=-100, max_value=100), min_size=1, max_size=50),
           st.floats(min_value=0, max_value=0.99))
    @settings(max_examples=60, deadline=None)
    def test_bounded_by_series_range(self, series, alpha):
        out = ema_smooth(series, alpha)
        assert out.min() >= min(series) - 1e-9
        assert out.max() <= max(series) + 1e-9

    def test_bad_alpha(self):
        with pytest.raises(ValueError, match="alpha"):
            ema_smooth([1.0], 1.0)
        with pytest.raises(ValueError, match="alpha"):
            ema_smooth([1.0], -0.1)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            ema_smooth([], 0.5)


class TestReports:
    def test_accuracy_json_schema(self, tmp_path):
        preds = [pred(0, 1), pred(1, 0)]
        report = accuracy_report(preds, [0, 0], ns=(1, 5, 10))
        path = tmp_path / "report.json"
        write_accuracy_json(report, path, most_confused_ids=[1, 0])
        payload = json.loads(path.read_text())
        assert set(payload) == {"top_n", "samples", "most_confused"}
        assert payload["samples"] == 2
        assert payload["top_n"]["1"] == 0.5
        assert payload["top_n"]["5"] == 1.0

    def test_confusion_csv_layout(self, tmp_path):
        cm = confusion_matrix([pred(0), pred(1)], [0, 0], 2, label_names=("ash", "bolt"))
        path = tmp_path / "cm.csv"
        write_confusion_csv(cm, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "true\\predicted,ash,bolt,abstain"
        assert lines[1] == "ash,1,1,0"
        assert lines[2] == "bolt,0,0,0"
