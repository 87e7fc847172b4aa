import numpy as np
import pytest

from oracles import auc_pairwise
from softattn.errors import ShapeError
from softattn.metrics import (ConfusionMatrix, auc_rank, auc_trapezoid, average, metrics_from_confusion,
                              roc_curve)

# published per-class precision and test supports for a 7-class HAM10000 model
TABLE_PRECISION = [1.000, 0.880, 0.720, 1.000, 0.670, 0.970, 1.000]
TABLE_SUPPORT = [23, 26, 66, 6, 34, 663, 10]


def hand_metrics(counts, c):
    """Per-class rates straight from the confusion-matrix definitions."""
    counts = np.asarray(counts)
    total = counts.sum()
    tp = counts[c, c]
    fp = counts[:, c].sum() - tp
    fn = counts[c, :].sum() - tp
    tn = total - tp - fp - fn
    div = lambda a, b: a / b if b else None  # noqa: E731
    return {"precision": div(tp, tp + fp), "accuracy": div(tp + tn, total),
            "sensitivity": div(tp, tp + fn), "specificity": div(tn, tn + fp)}


class TestConfusionMatrix:
    def test_from_labels(self):
        cm = ConfusionMatrix.from_labels([0, 0, 1, 2], [0, 1, 1, 0], 3)
        np.testing.assert_array_equal(cm.counts, [[1, 1, 0], [0, 1, 0], [1, 0, 0]])

    def test_one_vs_rest(self):
        cm = ConfusionMatrix([[5, 2], [1, 7]])
        assert cm.one_vs_rest(0) == (5, 1, 2, 7)
        assert cm.one_vs_rest(1) == (7, 2, 1, 5)

    def test_add(self):
        cm = ConfusionMatrix([[1, 0], [0, 1]]) + ConfusionMatrix([[0, 2], [3, 0]])
        np.testing.assert_array_equal(cm.counts, [[1, 2], [3, 1]])

    def test_not_square(self):
        with pytest.raises(ShapeError):
            ConfusionMatrix(np.zeros((2, 3)))


class TestAuc:
    def test_perfect_and_inverted(self):
        assert auc_rank([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert auc_rank([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    def test_all_tied(self):
        assert auc_rank([0.5] * 4, [0, 1, 0, 1]) == 0.5

    def test_single_class_undefined(self):
        assert auc_rank([0.1, 0.2], [1, 1]) is None
        assert auc_trapezoid([0.1, 0.2], [0, 0]) is None

    def test_against_pairwise_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(2, 21))
            scores = rng.integers(0, 5, n) / 4.0
            labels = rng.random(n) < 0.5
            if labels.all() or not labels.any():
                continue
            ref = auc_pairwise(scores, labels)
            assert abs(auc_rank(scores, labels) - ref) <= 1e-12
            assert abs(auc_trapezoid(scores, labels) - ref) <= 1e-12

    def test_roc_endpoints(self):
        fpr, tpr = roc_curve([0.3, 0.3, 0.9, 0.1], [1, 0, 1, 0])
        assert (fpr[0], tpr[0]) == (0.0, 0.0)
        assert (fpr[-1], tpr[-1]) == (1.0, 1.0)
        assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)


class TestAveraging:
    def test_table_weighted_precision(self):
        assert abs(average(TABLE_PRECISION, TABLE_SUPPORT) - 0.937) <= 0.001

    def test_table_macro_precision(self):
        assert abs(average(TABLE_PRECISION) - 0.892) <= 0.001

    def test_undefined_values_skipped(self):
        assert average([None, 0.5, 1.0], [10, 1, 1]) == 0.75
        assert average([None, None]) is None


class TestMetricsFromConfusion:
    def test_matches_hand_formulas(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            c = int(rng.integers(2, 6))
            counts = rng.integers(0, 15, (c, c))
            counts[np.arange(c), np.arange(c)] += 1
            report = metrics_from_confusion(ConfusionMatrix(counts))
            for k, m in enumerate(report.per_class):
                for name, value in hand_metrics(counts, k).items():
                    assert m.get(name) == value

    def test_undefined_precision_warns(self):
        cm = ConfusionMatrix([[3, 0], [2, 0]])
        with pytest.warns(UserWarning, match="precision"):
            report = metrics_from_confusion(cm)
        assert report.per_class[1].precision is None
        assert report.macro["precision"] == 0.6

    def test_weighted_uses_support(self):
        cm = ConfusionMatrix([[8, 0], [1, 1]])
        r = metrics_from_confusion(cm)
        sens = [1.0, 0.5]
        assert r.weighted["sensitivity"] == pytest.approx((8 * sens[0] + 2 * sens[1]) / 10)
        assert r.macro["sensitivity"] == pytest.approx(0.75)
        assert r.accuracy == 0.9

    def test_auc_from_scores(self):
        labels = np.array([0, 0, 1, 1])
        scores = np.array([[0.9, 0.1], [0.6, 0.4], [0.3, 0.7], [0.55, 0.45]])
        cm = ConfusionMatrix.from_labels(labels, scores.argmax(axis=1), 2)
        r = metrics_from_confusion(cm, scores, labels, ["a", "b"])
        assert r.per_class[1].auc == pytest.approx(auc_pairwise(scores[:, 1], labels == 1))

    def test_score_shape_mismatch(self):
        with pytest.raises(ShapeError):
            metrics_from_confusion(ConfusionMatrix([[1, 0], [0, 1]]), np.zeros((2, 3)), [0, 1])


class TestReportFormats:
    def report(self):
        labels = np.array([0, 1, 1, 2])
        scores = np.eye(3)[[0, 1, 2, 2]] * 0.8 + 0.2 / 3
        cm = ConfusionMatrix.from_labels(labels, scores.argmax(axis=1), 3)
        return metrics_from_confusion(cm, scores, labels, ["x", "y", "z"])

    def test_tsv_layout(self):
        lines = self.report().to_tsv().splitlines()
        assert lines[0].split("\t") == ["class", "support", "precision", "accuracy", "sensitivity",
                                        "specificity", "auc"]
        assert [ln.split("\t")[0] for ln in lines[1:]] == ["x", "y", "z", "__macro__", "__weighted__",
                                                           "__accuracy__"]
        assert lines[-1].split("\t")[3] == "0.750000"
        assert all(len(ln.split("\t")) == 7 for ln in lines)

    def test_text_has_averages(self):
        text = self.report().to_text()
        assert "Avg" in text and "W. Avg" in text
        assert "overall accuracy: 0.7500" in text

    def test_undefined_written_out(self):
        with pytest.warns(UserWarning):
            r = metrics_from_confusion(ConfusionMatrix([[2, 0], [1, 0]]))
        assert "undefined" in r.to_tsv()

