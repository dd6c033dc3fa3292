import numpy as np
import pytest

from setformer.metrics import ConfusionMatrix, confusion_csv, summarize


def brute_force_metrics(pairs, k):
    """Recompute every metric directly from the (true, predicted) list."""
    n = len(pairs)
    accuracy = sum(1 for t, p in pairs if t == p) / n
    precision, recall, f1 = [], [], []
    for c in range(k):
        tp = sum(1 for t, p in pairs if t == c and p == c)
        fp = sum(1 for t, p in pairs if t != c and p == c)
        fn = sum(1 for t, p in pairs if t == c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        precision.append(prec)
        recall.append(rec)
        f1.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return accuracy, precision, recall, f1


class TestUpdates:
    def test_single_update(self):
        cm = ConfusionMatrix(4)
        cm.update(2, 2)
        assert cm.counts[2, 2] == 1 and cm.total == 1

    def test_total_grows_by_one(self):
        cm = ConfusionMatrix(3)
        for i, (t, p) in enumerate([(0, 1), (2, 2), (1, 0)], start=1):
            cm.update(t, p)
            assert cm.total == i

    def test_updates_commute(self, rng):
        pairs = [(int(rng.integers(4)), int(rng.integers(4))) for _ in range(60)]
        a = ConfusionMatrix(4)
        b = ConfusionMatrix(4)
        for t, p in pairs:
            a.update(t, p)
        for t, p in reversed(pairs):
            b.update(t, p)
        assert np.array_equal(a.counts, b.counts)

    def test_out_of_range_rejected(self):
        cm = ConfusionMatrix(3)
        with pytest.raises(ValueError, match="out of range"):
            cm.update(3, 0)
        with pytest.raises(ValueError):
            cm.update(0, -1)

    def test_merge_is_cellwise_sum(self, rng):
        a = ConfusionMatrix.from_pairs(rng.integers(0, 3, 30), rng.integers(0, 3, 30), 3)
        b = ConfusionMatrix.from_pairs(rng.integers(0, 3, 20), rng.integers(0, 3, 20), 3)
        expected = a.counts + b.counts
        assert np.array_equal(a.merge(b).counts, expected)


class TestSummarize:
    def test_perfect_classifier(self):
        cm = ConfusionMatrix(3)
        cm.counts[np.diag_indices(3)] = [5, 7, 9]
        s = summarize(cm)
        assert s.accuracy == 1.0 and s.macro_f1 == 1.0

    def test_always_predict_class0(self):
        # balanced 2 classes, everything predicted as class 0
        cm = ConfusionMatrix.from_pairs([0] * 50 + [1] * 50, [0] * 100, 2)
        s = summarize(cm)
        assert s.accuracy == 0.5
        assert abs(s.f1[0] - 2 / 3) < 1e-12
        assert s.f1[1] == 0.0
        assert abs(s.macro_f1 - 1 / 3) < 1e-12

    def test_relabeling_symmetry(self, rng):
        t = rng.integers(0, 5, 400)
        p = rng.integers(0, 5, 400)
        base = summarize(ConfusionMatrix.from_pairs(t, p, 5))
        perm = rng.permutation(5)
        remapped = summarize(ConfusionMatrix.from_pairs(perm[t], perm[p], 5))
        assert abs(base.macro_f1 - remapped.macro_f1) < 1e-12
        assert abs(base.accuracy - remapped.accuracy) < 1e-12

    def test_against_brute_force(self, rng):
        for _ in range(300):
            k = int(rng.integers(2, 11))
            n = int(rng.integers(1, 500))
            t = rng.integers(0, k, n)
            p = rng.integers(0, k, n)
            s = summarize(ConfusionMatrix.from_pairs(t, p, k))
            acc, prec, rec, f1 = brute_force_metrics(list(zip(t, p)), k)
            assert abs(s.accuracy - acc) < 1e-12
            assert np.abs(s.precision - prec).max() < 1e-12
            assert np.abs(s.recall - rec).max() < 1e-12
            assert np.abs(s.f1 - f1).max() < 1e-12
            assert abs(s.macro_f1 - np.mean(f1)) < 1e-12

    def test_metrics_bounded(self, rng):
        for _ in range(50):
            k = int(rng.integers(2, 8))
            t = rng.integers(0, k, 100)
            p = rng.integers(0, k, 100)
            s = summarize(ConfusionMatrix.from_pairs(t, p, k))
            for v in ([s.accuracy, s.macro_precision, s.macro_recall, s.macro_f1]
                      + list(s.precision) + list(s.recall) + list(s.f1)):
                assert 0.0 <= v <= 1.0

    def test_empty_matrix_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            summarize(ConfusionMatrix(3))

    def test_single_class_collapse_for_larger_k(self, rng):
        # balanced k-class data, one predicted class: compare to brute force
        for k in range(3, 7):
            t = np.repeat(np.arange(k), 30)
            p = np.zeros_like(t)
            s = summarize(ConfusionMatrix.from_pairs(t, p, k))
            _, _, _, f1 = brute_force_metrics(list(zip(t, p)), k)
            assert abs(s.macro_f1 - np.mean(f1)) < 1e-12


class TestCsv:
    def test_header_and_cells(self):
        cm = ConfusionMatrix.from_pairs([0, 0, 1], [0, 1, 1], 2)
        text = confusion_csv(cm, ["Jogging", "Walking"])
        lines = text.strip().split("\n")
        assert lines[0] == "true\\predicted,Jogging,Walking"
        assert lines[1] == "Jogging,1,1"
        assert lines[2] == "Walking,0,1"

    def test_label_count_checked(self):
        with pytest.raises(ValueError):
            confusion_csv(ConfusionMatrix(3), ["a", "b"])
