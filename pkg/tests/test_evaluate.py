"""
Tests for confusion matrices, macro metrics and one-vs-rest curves
"""

import random

import numpy as np
import pytest

from src.evaluate import (
    average_precision,
    compare_models,
    confusion,
    curve_areas,
    curves_frame,
    evaluate,
    metrics,
    ovr_curves,
    roc_auc,
)
from src.types import ConfusionMatrix, DataError


def tally_metrics(preds, truth):
    """Per-class precision/recall/F1 by explicit counting"""
    per_class = []
    for c in range(3):
        tp = sum(1 for p, t in zip(preds, truth) if p == c and t == c)
        predicted = sum(1 for p in preds if p == c)
        actual = sum(1 for t in truth if t == c)
        precision = tp / predicted if predicted else 0.0
        recall = tp / actual if actual else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class.append((precision, recall, f1))
    accuracy = sum(1 for p, t in zip(preds, truth) if p == t) / len(truth)
    return accuracy, per_class


def mann_whitney_auc(scores, positive):
    pos = [s for s, flag in zip(scores, positive) if flag]
    neg = [s for s, flag in zip(scores, positive) if not flag]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def enumerated_average_precision(scores, positive):
    """Precision times recall gain summed over every distinct threshold, highest first"""
    scores = [float(s) for s in scores]
    total = sum(1 for flag in positive if flag)
    area, previous_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, flag in zip(scores, positive) if flag and s >= t)
        flagged = sum(1 for s in scores if s >= t)
        recall = tp / total
        area += (recall - previous_recall) * (tp / flagged)
        previous_recall = recall
    return area


def random_probs(n, seed, levels=None):
    rng = np.random.default_rng(seed)
    raw = rng.random((n, 3))
    if levels:
        raw = np.round(raw * levels) / levels + 1e-3
    return raw / raw.sum(axis=1, keepdims=True)


class TestConfusion:
    def test_counts_indexed_true_then_predicted(self):
        cm = confusion([0, 1, 2, 1], [0, 1, 2, 0])
        assert cm.to_list() == [[1, 1, 0], [0, 1, 0], [0, 0, 1]]
        assert cm.total == 4

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            confusion([0, 1], [0])

    def test_empty(self):
        with pytest.raises(DataError):
            confusion([], [])

    def test_out_of_range_code(self):
        with pytest.raises(DataError):
            confusion([0, 3], [0, 1])


class TestMetrics:
    """Accuracy and macro precision, recall and F1"""

    def test_worked_example(self):
        report = evaluate([0, 1, 2, 1], [0, 1, 2, 0])
        assert report.accuracy == pytest.approx(0.75)
        assert report.macro_precision == pytest.approx(0.8333, abs=1e-4)
        assert report.macro_recall == pytest.approx(0.8333, abs=1e-4)
        assert report.macro_f1 == pytest.approx(0.7778, abs=1e-4)

    def test_perfect_predictions(self):
        report = evaluate([0, 1, 2], [0, 1, 2])
        assert report.accuracy == report.macro_f1 == 1.0

    def test_never_predicted_class_scores_zero(self):
        report = evaluate([0, 0, 0], [0, 1, 2])
        assert report.per_class[1].precision == 0.0
        assert report.per_class[1].f1 == 0.0
        assert report.per_class[0].support == 1

    def test_empty_matrix(self):
        with pytest.raises(DataError):
            metrics(ConfusionMatrix(counts=np.zeros((3, 3), dtype=np.int64)))

    def test_fuzz_against_tally(self):
        """Test 1,000 random prediction sets against explicit counting"""
        rng = random.Random(17)
        for _ in range(1000):
            n = rng.randint(1, 30)
            truth = [rng.randrange(3) for _ in range(n)]
            preds = [rng.randrange(3) for _ in range(n)]
            accuracy, per_class = tally_metrics(preds, truth)
            report = evaluate(preds, truth)
            assert report.accuracy == pytest.approx(accuracy)
            for got, (precision, recall, f1) in zip(report.per_class, per_class):
                assert got.precision == pytest.approx(precision)
                assert got.recall == pytest.approx(recall)
                assert got.f1 == pytest.approx(f1)
            assert report.macro_f1 == pytest.approx(sum(m[2] for m in per_class) / 3)
            assert report.confusion.total == n

    def test_report_dict(self):
        data = evaluate([0, 1, 2, 1], [0, 1, 2, 0]).to_dict()
        assert set(data["per_class"]) == {"pro_ed", "neutral", "pro_recovery"}
        assert data["confusion"][0] == [1, 1, 0]

    def test_compare_models(self):
        reports = compare_models({"a": [0, 1, 2], "b": [2, 1, 0]}, [0, 1, 2])
        assert reports["a"].accuracy == 1.0
        assert reports["b"].accuracy == pytest.approx(1 / 3)


class TestAreas:
    def test_trapezoid(self):
        assert roc_auc([0.0, 0.5, 1.0], [0.0, 1.0, 1.0]) == pytest.approx(0.75)

    def test_step_average_precision(self):
        assert average_precision([0.0, 0.5, 1.0], [1.0, 1.0, 0.5]) == pytest.approx(0.75)


class TestOvrCurves:
    """One-vs-rest ROC and PR curves"""

    def test_roc_area_equals_mann_whitney(self):
        for seed in range(20):
            probs = random_probs(60, seed, levels=5 if seed % 2 else None)
            truth = np.random.default_rng(100 + seed).integers(0, 3, 60)
            curves = ovr_curves(probs, truth)
            for c, name in enumerate(["pro_ed", "neutral", "pro_recovery"]):
                expected = mann_whitney_auc(probs[:, c], truth == c)
                assert curves.roc[name].area == pytest.approx(expected, abs=1e-12)

    def test_pr_area_matches_threshold_enumeration(self):
        for seed in range(20):
            probs = random_probs(50, seed, levels=4 if seed % 2 else None)
            truth = np.random.default_rng(200 + seed).integers(0, 3, 50)
            curves = ovr_curves(probs, truth)
            for c, name in enumerate(["pro_ed", "neutral", "pro_recovery"]):
                if not curves.pr[name].defined:
                    continue
                expected = enumerated_average_precision(probs[:, c], truth == c)
                assert curves.pr[name].area == pytest.approx(expected, abs=1e-12)

    def test_constant_scores_give_half(self):
        probs = np.full((6, 3), 1 / 3)
        curves = ovr_curves(probs, [0, 1, 2, 0, 1, 2])
        assert curves.roc["pro_ed"].area == pytest.approx(0.5)
        assert curves.roc["pro_ed"].xs == [0.0, 1.0]

    def test_separable_scores(self):
        truth = [0, 0, 1, 1, 2, 2]
        probs = np.eye(3)[truth] * 0.8 + 0.1 * (1 - np.eye(3)[truth]) / 1.0
        curves = ovr_curves(probs, truth)
        for name in ("pro_ed", "neutral", "pro_recovery", "macro"):
            assert curves.roc[name].area == pytest.approx(1.0)
            assert curves.pr[name].area == pytest.approx(1.0)

    def test_curves_start_at_origin_and_end_at_one(self):
        probs = random_probs(40, 3)
        truth = np.arange(40) % 3
        curves = ovr_curves(probs, truth)
        for name, roc in curves.roc.items():
            assert (roc.xs[0], roc.ys[0]) == (0.0, 0.0)
            assert (roc.xs[-1], roc.ys[-1]) == (1.0, 1.0)
            assert roc.thresholds[0] == float("inf")
            assert curves.pr[name].ys[0] == 1.0

    def test_rates_monotone_along_sweep(self):
        probs = random_probs(80, 4, levels=6)
        truth = np.random.default_rng(5).integers(0, 3, 80)
        for curve in ovr_curves(probs, truth).roc.values():
            assert np.all(np.diff(curve.xs) >= 0)
            assert np.all(np.diff(curve.ys) >= 0)
            assert np.all(np.diff(curve.thresholds) < 0)

    def test_row_order_does_not_matter(self):
        probs = random_probs(50, 6)
        truth = np.random.default_rng(7).integers(0, 3, 50)
        order = np.random.default_rng(8).permutation(50)
        a = curve_areas(ovr_curves(probs, truth))
        b = curve_areas(ovr_curves(probs[order], truth[order]))
        for kind in a:
            for name in a[kind]:
                assert a[kind][name] == pytest.approx(b[kind][name], abs=1e-12)

    def test_class_without_positives_is_undefined(self):
        probs = random_probs(10, 9)
        truth = [0, 1] * 5
        curves = ovr_curves(probs, truth)
        assert not curves.roc["pro_recovery"].defined
        assert curves.roc["pro_recovery"].area is None
        areas = curve_areas(curves)
        assert "pro_recovery" not in areas["roc_auc"]
        assert "macro" in areas["roc_auc"]

    def test_single_class_truth_has_no_macro(self):
        curves = ovr_curves(random_probs(5, 1), [1] * 5)
        assert not any(curve.defined for curve in curves.roc.values())

    def test_shape_checked(self):
        with pytest.raises(DataError):
            ovr_curves(np.zeros((3, 2)), [0, 1, 2])
        with pytest.raises(DataError):
            ovr_curves(np.zeros((0, 3)), [])

    def test_curves_frame_rows(self):
        probs = random_probs(12, 2)
        curves = ovr_curves(probs, [0, 1] * 6)
        frame = curves_frame(curves.roc)
        assert list(frame.columns) == ["class", "threshold", "x", "y"]
        assert set(frame["class"]) == {"pro_ed", "neutral", "macro"}
        assert len(frame) == sum(len(c.xs) for c in curves.roc.values() if c.defined)
