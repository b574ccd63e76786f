"""Metrics module vs a brute-force oracle, plus published-table reproductions."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corngrader import metrics as M
from corngrader.metrics import ConfusionMatrix


def brute_force_report(preds, truth, classes):
    """Naive per-sample counting; the oracle the module must match exactly."""
    per_class = []
    for c in classes:
        tp = sum(1 for p, t in zip(preds, truth) if p == c and t == c)
        fp = sum(1 for p, t in zip(preds, truth) if p == c and t != c)
        fn = sum(1 for p, t in zip(preds, truth) if p != c and t == c)
        support = sum(1 for t in truth if t == c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class.append((precision, recall, f1, support))
    acc = sum(1 for p, t in zip(preds, truth) if p == t) / len(truth)
    n = len(truth)
    macro = tuple(sum(m[i] for m in per_class) / len(classes) for i in range(3))
    weighted = tuple(sum(m[i] * m[3] for m in per_class) / n for i in range(3))
    return per_class, acc, macro, weighted


STAGE1_CM = ConfusionMatrix(("pure", "impure"), np.array([[521, 33], [35, 501]]))
STAGE2_CM = ConfusionMatrix(("flat", "round"), np.array([[279, 15], [19, 265]]))
STAGE3_CM = ConfusionMatrix(("embryo_down", "embryo_up"), np.array([[104, 15], [11, 163]]))


class TestConfusion:
    def test_perfect_predictions_are_diagonal(self):
        labels = ["a", "b", "a", "b", "b"]
        cm = M.confusion(labels, labels, ["a", "b"])
        np.testing.assert_array_equal(cm.counts, [[2, 0], [0, 3]])

    def test_counts_follow_true_row_pred_col(self):
        cm = M.confusion(preds=["b"], truth=["a"], classes=["a", "b"])
        np.testing.assert_array_equal(cm.counts, [[0, 1], [0, 0]])

    def test_single_predicted_class_fills_one_column(self):
        cm = M.confusion(["a"] * 6, ["a", "a", "b", "b", "b", "b"], ["a", "b"])
        np.testing.assert_array_equal(cm.counts, [[2, 0], [4, 0]])
        assert [cm.support(0), cm.support(1)] == [2, 4]

    def test_total_equals_sample_count(self):
        rng = np.random.default_rng(0)
        preds = rng.integers(0, 3, 200).tolist()
        truth = rng.integers(0, 3, 200).tolist()
        assert M.confusion(preds, truth, [0, 1, 2]).n == 200

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="length mismatch"):
            M.confusion(["a"], ["a", "b"], ["a", "b"])

    def test_unknown_label_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            M.confusion(["c"], ["a"], ["a", "b"])


class TestPublishedTables:
    """The three grading-stage test matrices and their published scores."""

    def test_stage1_per_class(self):
        per = M.class_metrics(STAGE1_CM)
        pure, impure = per
        assert abs(pure["precision"] - 0.9370) < 5e-4
        assert abs(pure["recall"] - 0.9404) < 5e-4
        assert abs(pure["f1"] - 0.9387) < 5e-4
        assert pure["support"] == 554
        assert abs(impure["precision"] - 0.9382) < 5e-4
        assert abs(impure["recall"] - 0.9347) < 5e-4
        assert abs(impure["f1"] - 0.9365) < 5e-4
        assert impure["support"] == 536

    def test_stage1_accuracy(self):
        assert M.accuracy(STAGE1_CM) == 1022 / 1090
        assert abs(M.accuracy(STAGE1_CM) - 0.9376) < 5e-4

    def test_stage2_accuracy(self):
        assert M.accuracy(STAGE2_CM) == 544 / 578
        assert abs(M.accuracy(STAGE2_CM) - 0.9411) < 5e-4

    def test_stage3_per_class_and_aggregates(self):
        rep = M.report_from_confusion(STAGE3_CM)
        down = rep.per_class[0]
        assert abs(down["precision"] - 0.9043) < 5e-4
        assert abs(down["recall"] - 0.8739) < 5e-4
        assert abs(down["f1"] - 0.8890) < 5e-4
        assert abs(rep.macro["precision"] - 0.9100) < 5e-4
        assert abs(rep.accuracy - 0.9112) < 5e-4
        # support-weighted precision lands between the per-class values
        assert abs(rep.weighted["precision"] - 0.9111) < 5e-4


class TestConventions:
    def test_absent_class_scores_zero(self):
        cm = M.confusion(["a", "a"], ["a", "a"], ["a", "b"])
        absent = M.class_metrics(cm)[1]
        assert absent == {"class": "b", "precision": 0.0, "recall": 0.0, "f1": 0.0, "support": 0}

    def test_never_predicted_class_zero_precision(self):
        cm = M.confusion(["a", "a"], ["a", "b"], ["a", "b"])
        b = M.class_metrics(cm)[1]
        assert b["precision"] == 0.0 and b["recall"] == 0.0 and b["f1"] == 0.0

    def test_zero_samples_rejected(self):
        cm = ConfusionMatrix(("a", "b"), np.zeros((2, 2), dtype=np.int64))
        with pytest.raises(ValueError, match="zero samples"):
            M.accuracy(cm)

    def test_single_correct_sample(self):
        rep = M.report(["a"], ["a"], ["a"])
        assert rep.accuracy == 1.0
        assert rep.per_class[0]["precision"] == 1.0
        # with every class present exactly once, both averages equal the
        # per-class values
        assert rep.macro["precision"] == rep.weighted["precision"] == 1.0
        assert rep.macro["f1"] == rep.weighted["f1"] == 1.0

    def test_balanced_supports_make_macro_equal_weighted(self):
        preds = ["a", "b", "a", "b"]
        truth = ["a", "a", "b", "b"]
        rep = M.report(preds, truth, ["a", "b"])
        assert rep.macro == rep.weighted


class TestAgainstBruteForce:
    @pytest.mark.parametrize("seed,n", [(0, 10), (1, 137), (2, 1000), (3, 10000)])
    def test_random_predictions_match_exactly(self, seed, n):
        rng = np.random.default_rng(seed)
        classes = ["a", "b", "c"]
        preds = [classes[i] for i in rng.integers(0, 3, n)]
        truth = [classes[i] for i in rng.integers(0, 3, n)]
        rep = M.report(preds, truth, classes)
        oracle_per, oracle_acc, oracle_macro, oracle_weighted = brute_force_report(
            preds, truth, classes
        )
        for got, want in zip(rep.per_class, oracle_per):
            assert (got["precision"], got["recall"], got["f1"], got["support"]) == want
        assert rep.accuracy == oracle_acc
        assert (rep.macro["precision"], rep.macro["recall"], rep.macro["f1"]) == oracle_macro
        assert (
            rep.weighted["precision"],
            rep.weighted["recall"],
            rep.weighted["f1"],
        ) == oracle_weighted


@st.composite
def random_confusion(draw, max_classes=4, max_count=50):
    c = draw(st.integers(2, max_classes))
    counts = draw(
        st.lists(
            st.lists(st.integers(0, max_count), min_size=c, max_size=c),
            min_size=c,
            max_size=c,
        )
    )
    arr = np.array(counts, dtype=np.int64)
    if arr.sum() == 0:
        arr[0, 0] = 1
    return ConfusionMatrix(tuple(f"c{i}" for i in range(c)), arr)


class TestProperties:
    @settings(deadline=None, max_examples=100)
    @given(cm=random_confusion())
    def test_weighted_recall_equals_accuracy(self, cm):
        rep = M.report_from_confusion(cm)
        assert abs(rep.weighted["recall"] - rep.accuracy) < 1e-12

    @settings(deadline=None, max_examples=100)
    @given(cm=random_confusion(), seed=st.integers(0, 2**32 - 1))
    def test_permutation_invariance(self, cm, seed):
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(cm.classes))
        shuffled = ConfusionMatrix(
            tuple(cm.classes[i] for i in perm), cm.counts[np.ix_(perm, perm)]
        )
        a = M.report_from_confusion(cm)
        b = M.report_from_confusion(shuffled)
        assert a.accuracy == b.accuracy
        by_name_a = {m["class"]: m for m in a.per_class}
        by_name_b = {m["class"]: m for m in b.per_class}
        assert by_name_a == by_name_b
        for key in ("precision", "recall", "f1"):
            assert abs(a.macro[key] - b.macro[key]) < 1e-12
            assert abs(a.weighted[key] - b.weighted[key]) < 1e-12

    @settings(deadline=None, max_examples=50)
    @given(cm=random_confusion())
    def test_metrics_stay_in_unit_interval(self, cm):
        rep = M.report_from_confusion(cm)
        values = [rep.accuracy]
        for m in rep.per_class:
            values += [m["precision"], m["recall"], m["f1"]]
        values += list(rep.macro.values()) + list(rep.weighted.values())
        assert all(0.0 <= v <= 1.0 for v in values)


class TestRendering:
    def test_text_has_four_decimals_and_all_rows(self):
        rep = M.report_from_confusion(STAGE1_CM)
        text = rep.to_text()
        for m in rep.per_class:
            assert f"{m['precision']:.4f}" in text
            assert f"{m['recall']:.4f}" in text
            assert str(m["support"]) in text
        assert f"{rep.accuracy:.4f}" in text
        assert "accuracy" in text and "macro avg" in text and "weighted avg" in text
        assert "1090" in text

    def test_dict_matches_text_numbers(self):
        rep = M.report_from_confusion(STAGE2_CM)
        d = rep.to_dict()
        text = rep.to_text()
        assert f"{d['accuracy']:.4f}" in text
        assert f"{d['per_class'][0]['precision']:.4f}" in text
        assert d["n"] == 578
        assert d["classes"] == ["flat", "round"]
