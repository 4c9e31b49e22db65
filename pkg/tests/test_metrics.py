from fractions import Fraction

import numpy as np
import pytest

from hemoforge.errors import MetricsError
from hemoforge.metrics import ConfusionMatrix, compute_metrics, confusion_matrix
from hemoforge.registry import ClassEntry, ClassRegistry, Lineage


def small_registry(codes):
    lineages = list(Lineage)
    return ClassRegistry([
        ClassEntry(code, code.lower(), lineages[i % len(lineages)])
        for i, code in enumerate(codes)
    ])


def oracle_metrics(counts):
    """Per-class metrics straight from the one-vs-rest definitions."""
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    rows = []
    for i in range(counts.shape[0]):
        tp = counts[i, i]
        fn = counts[i].sum() - tp
        fp = counts[:, i].sum() - tp
        tn = total - tp - fn - fp
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        spec = tn / (tn + fp) if tn + fp else 0.0
        rows.append((p, r, f1, spec, counts[i].sum()))
    return rows


class TestConfusionMatrix:
    def test_builder_counts_pairs(self, registry3):
        cm = confusion_matrix(["AA", "AA", "BB", "CC"], ["AA", "BB", "BB", "AA"], registry3)
        expected = np.array([[1, 1, 0], [0, 1, 0], [1, 0, 0]])
        assert np.array_equal(cm.counts, expected)
        assert cm.total == 4

    def test_length_mismatch(self, registry3):
        with pytest.raises(MetricsError, match="mismatch"):
            confusion_matrix(["AA"], ["AA", "BB"], registry3)

    def test_shape_must_match_registry(self, registry3):
        with pytest.raises(MetricsError, match="shape"):
            ConfusionMatrix(np.zeros((2, 2), dtype=np.int64), registry3)

    def test_negative_counts_rejected(self, registry3):
        counts = np.zeros((3, 3), dtype=np.int64)
        counts[0, 1] = -1
        with pytest.raises(MetricsError, match=">= 0"):
            ConfusionMatrix(counts, registry3)

    def test_save_load_roundtrip(self, registry3, tmp_path):
        counts = np.arange(9, dtype=np.int64).reshape(3, 3)
        cm = ConfusionMatrix(counts, registry3)
        cm.save(tmp_path / "cm.csv")
        back = ConfusionMatrix.load(tmp_path / "cm.csv", registry3)
        assert np.array_equal(back.counts, counts)
        assert not (tmp_path / "cm.csv.tmp").exists()

    def test_load_rejects_foreign_header(self, registry3, tmp_path):
        (tmp_path / "cm.csv").write_text("class,XX,YY,ZZ\nXX,1,0,0\n", encoding="utf-8")
        with pytest.raises(MetricsError, match="header"):
            ConfusionMatrix.load(tmp_path / "cm.csv", registry3)


class TestComputeMetrics:
    def test_two_class_example_exact(self):
        # [[8,2],[3,7]]: F1 = 16/21 and 14/19, macro F1 = 299/399
        reg = small_registry(["P", "N"])
        cm = ConfusionMatrix(np.array([[8, 2], [3, 7]], dtype=np.int64), reg)
        rep = compute_metrics(cm)
        f1_p = Fraction(2 * 8, 2 * 8 + 2 + 3)
        f1_n = Fraction(2 * 7, 2 * 7 + 3 + 2)
        assert (f1_p + f1_n) / 2 == Fraction(299, 399)
        assert rep.macro_f1 == pytest.approx(float(Fraction(299, 399)), abs=1e-12)
        assert rep.macro_f1 == pytest.approx(0.7493734335839599, abs=1e-12)
        assert rep.balanced_accuracy == pytest.approx(0.75)
        assert rep.macro_precision == pytest.approx(float(Fraction(149, 198)), abs=1e-12)
        assert rep.macro_specificity == pytest.approx(0.75)
        assert rep.micro_accuracy == pytest.approx(0.75)

    def test_perfect_diagonal(self, registry3):
        cm = ConfusionMatrix(np.diag([5, 3, 2]).astype(np.int64), registry3)
        rep = compute_metrics(cm)
        assert rep.macro_f1 == 1.0
        assert rep.balanced_accuracy == 1.0
        assert rep.micro_accuracy == 1.0
        assert rep.excluded == ()

    def test_matches_oracle_on_random_matrices(self):
        rng = np.random.default_rng(99)
        for trial in range(25):
            c = int(rng.integers(2, 8))
            counts = rng.integers(0, 12, size=(c, c)).astype(np.int64)
            counts += np.eye(c, dtype=np.int64)          # ensure support everywhere
            reg = small_registry([f"K{i}" for i in range(c)])
            rep = compute_metrics(ConfusionMatrix(counts, reg))
            rows = oracle_metrics(counts)
            assert rep.macro_f1 == pytest.approx(np.mean([r[2] for r in rows]), abs=1e-12)
            assert rep.balanced_accuracy == pytest.approx(
                np.mean([r[1] for r in rows]), abs=1e-12)
            assert rep.macro_precision == pytest.approx(
                np.mean([r[0] for r in rows]), abs=1e-12)
            assert rep.macro_specificity == pytest.approx(
                np.mean([r[3] for r in rows]), abs=1e-12)
            for i, code in enumerate(reg.codes):
                m = rep.per_class[code]
                assert (m.precision, m.recall, m.f1, m.specificity) == pytest.approx(rows[i][:4])
                assert m.support == rows[i][4]

    def test_matches_sklearn(self):
        sklearn_metrics = pytest.importorskip("sklearn.metrics")
        rng = np.random.default_rng(4)
        c = 5
        reg = small_registry([f"K{i}" for i in range(c)])
        y_true = rng.integers(0, c, size=400)
        y_pred = rng.integers(0, c, size=400)
        cm = confusion_matrix([reg.codes[i] for i in y_true],
                              [reg.codes[i] for i in y_pred], reg)
        rep = compute_metrics(cm)
        assert rep.macro_f1 == pytest.approx(
            sklearn_metrics.f1_score(y_true, y_pred, average="macro"), abs=1e-12)
        assert rep.balanced_accuracy == pytest.approx(
            sklearn_metrics.balanced_accuracy_score(y_true, y_pred), abs=1e-12)

    def test_zero_support_classes_excluded(self, registry3):
        counts = np.array([[4, 1, 0], [2, 3, 0], [0, 0, 0]], dtype=np.int64)
        rep = compute_metrics(ConfusionMatrix(counts, registry3))
        assert rep.excluded == ("CC",)
        rows = oracle_metrics(counts[:2, :2])
        # CC column is all zero, so the 2x2 restriction has the same HI metrics
        assert rep.macro_f1 == pytest.approx(np.mean([r[2] for r in rows]))
        assert "CC" in rep.per_class            # still reported per class

    def test_never_predicted_class_scores_zero(self, registry3):
        counts = np.array([[5, 0, 0], [3, 0, 0], [0, 2, 1]], dtype=np.int64)
        rep = compute_metrics(ConfusionMatrix(counts, registry3))
        m = rep.per_class["BB"]
        assert m.precision == 0.0 and m.recall == 0.0 and m.f1 == 0.0
        assert m.support == 3

    def test_explicit_exclusion(self, registry3):
        counts = np.diag([5, 3, 2]).astype(np.int64)
        rep = compute_metrics(ConfusionMatrix(counts, registry3), exclude={"AA"})
        assert rep.excluded == ("AA",)
        assert rep.macro_f1 == 1.0

    def test_empty_matrix_rejected(self, registry3):
        with pytest.raises(MetricsError, match="empty"):
            compute_metrics(ConfusionMatrix(np.zeros((3, 3), dtype=np.int64), registry3))

    def test_all_excluded_rejected(self, registry3):
        counts = np.diag([5, 3, 2]).astype(np.int64)
        with pytest.raises(MetricsError, match="excluded"):
            compute_metrics(ConfusionMatrix(counts, registry3),
                            exclude={"AA", "BB", "CC"})

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(12)
        counts = rng.integers(1, 10, size=(4, 4)).astype(np.int64)
        reg_a = small_registry(["A", "B", "C", "D"])
        rep_a = compute_metrics(ConfusionMatrix(counts, reg_a))
        perm = rng.permutation(4)
        reg_b = small_registry([f"{'ABCD'[i]}" for i in perm])
        rep_b = compute_metrics(ConfusionMatrix(counts[np.ix_(perm, perm)], reg_b))
        assert rep_a.macro_f1 == pytest.approx(rep_b.macro_f1, abs=1e-12)
        assert rep_a.balanced_accuracy == pytest.approx(rep_b.balanced_accuracy, abs=1e-12)

    def test_report_text_and_save(self, registry3, tmp_path):
        counts = np.diag([5, 3, 2]).astype(np.int64)
        rep = compute_metrics(ConfusionMatrix(counts, registry3))
        rep.save(tmp_path / "report.txt")
        text = (tmp_path / "report.txt").read_text(encoding="utf-8")
        assert "macro_f1 = 1.000000" in text
        assert "excluded_classes = -" in text
        assert "AA,1.000000,1.000000,1.000000,1.000000,5" in text
