"""
Edcurate Evaluate - Confusion matrices, macro metrics and one-vs-rest curves
"""

from typing import Dict, List, Mapping, Sequence
import logging

import numpy as np
import pandas as pd

from .types import (
    NUM_CLASSES,
    ClassMetrics,
    ConfusionMatrix,
    Curve,
    DataError,
    Label,
    MetricReport,
    OvrCurves,
)

logger = logging.getLogger(__name__)

MACRO = "macro"


def _as_codes(values: Sequence[int], name: str) -> np.ndarray:
    codes = np.asarray(values, dtype=np.int64).ravel()
    if codes.size and (codes.min() < 0 or codes.max() >= NUM_CLASSES):
        raise DataError(f"{name} contains codes outside 0..{NUM_CLASSES - 1}")
    return codes


def confusion(preds: Sequence[int], truth: Sequence[int]) -> ConfusionMatrix:
    """Counts indexed [true code][predicted code]"""
    preds = _as_codes(preds, "Predictions")
    truth = _as_codes(truth, "Truth")
    if len(preds) != len(truth):
        raise DataError(f"Length mismatch: {len(preds)} predictions, {len(truth)} truths")
    if len(truth) == 0:
        raise DataError("Cannot evaluate an empty prediction set")
    counts = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(counts, (truth, preds), 1)
    return ConfusionMatrix(counts=counts)


def _ratio(numerator: float, denominator: float) -> float:
    return float(numerator / denominator) if denominator else 0.0


def metrics(cm: ConfusionMatrix) -> MetricReport:
    """Accuracy plus per-class and macro precision, recall and F1.

    Zero denominators give 0 for the affected cell.
    """
    if cm.total <= 0:
        raise DataError("Confusion matrix is empty")
    counts = cm.counts
    diag = np.diag(counts)
    predicted = counts.sum(axis=0)
    actual = counts.sum(axis=1)

    per_class = []
    for c in range(NUM_CLASSES):
        precision = _ratio(diag[c], predicted[c])
        recall = _ratio(diag[c], actual[c])
        f1 = _ratio(2 * precision * recall, precision + recall)
        per_class.append(ClassMetrics(precision, recall, f1, int(actual[c])))

    return MetricReport(
        accuracy=float(diag.sum() / cm.total),
        macro_precision=float(np.mean([m.precision for m in per_class])),
        macro_recall=float(np.mean([m.recall for m in per_class])),
        macro_f1=float(np.mean([m.f1 for m in per_class])),
        per_class=per_class,
        confusion=cm,
    )


def evaluate(preds: Sequence[int], truth: Sequence[int]) -> MetricReport:
    return metrics(confusion(preds, truth))


def compare_models(
    predictions: Mapping[str, Sequence[int]], truth: Sequence[int]
) -> Dict[str, MetricReport]:
    """Metric reports for several prediction sets on the same truth"""
    reports = {name: evaluate(preds, truth) for name, preds in predictions.items()}
    for name, report in reports.items():
        logger.info(
            f"{name}: accuracy {report.accuracy:.4f}, macro F1 {report.macro_f1:.4f}"
        )
    return reports


def roc_auc(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Trapezoidal area under a curve given in sweep order"""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    return float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0))


def average_precision(recalls: Sequence[float], precisions: Sequence[float]) -> float:
    """Step-wise sum of precision times recall increments"""
    recalls = np.asarray(recalls, dtype=np.float64)
    precisions = np.asarray(precisions, dtype=np.float64)
    return float(np.sum(np.diff(recalls) * precisions[1:]))


def _rates_at(scores: np.ndarray, positive: np.ndarray, thresholds: np.ndarray):
    """True and false positive counts when predicting positive for score >= t"""
    pos_sorted = np.sort(scores[positive])
    neg_sorted = np.sort(scores[~positive])
    tp = len(pos_sorted) - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = len(neg_sorted) - np.searchsorted(neg_sorted, thresholds, side="left")
    return tp.astype(np.float64), fp.astype(np.float64)


def _curves_on_grid(scores: np.ndarray, positive: np.ndarray, thresholds: np.ndarray):
    tp, fp = _rates_at(scores, positive, thresholds)
    n_pos = float(positive.sum())
    n_neg = float(len(positive) - n_pos)
    flagged = tp + fp
    precision = np.divide(tp, flagged, out=np.ones_like(tp), where=flagged > 0)
    return fp / n_neg, tp / n_pos, tp / n_pos, precision


def _sweep(scores: np.ndarray) -> np.ndarray:
    return np.concatenate([[np.inf], np.unique(scores)[::-1]])


def ovr_curves(prob_rows: np.ndarray, truth: Sequence[int]) -> OvrCurves:
    """One-vs-rest ROC and PR curves per class plus their macro average.

    Each class sweeps its own observed scores in descending order, starting
    from an infinite threshold (nothing flagged). A class without positives or
    without negatives in the truth gets an undefined curve and is left out of
    the macro average, which is taken pointwise over the union of all defined
    classes' scores.
    """
    probs = np.asarray(prob_rows, dtype=np.float64)
    truth = _as_codes(truth, "Truth")
    if probs.ndim != 2 or probs.shape != (len(truth), NUM_CLASSES):
        raise DataError(
            f"Expected {len(truth)}x{NUM_CLASSES} probabilities, got shape {probs.shape}"
        )
    if len(truth) == 0:
        raise DataError("Cannot build curves from an empty evaluation set")

    result = OvrCurves()
    defined: List[int] = []
    for label in Label:
        c = label.code
        positive = truth == c
        if positive.all() or not positive.any():
            logger.warning(f"Class {label.value} lacks positives or negatives; curve undefined")
            result.roc[label.value] = Curve(name=label.value, defined=False)
            result.pr[label.value] = Curve(name=label.value, defined=False)
            continue
        defined.append(c)
        thresholds = _sweep(probs[:, c])
        fpr, tpr, recall, precision = _curves_on_grid(probs[:, c], positive, thresholds)
        result.roc[label.value] = Curve(
            name=label.value,
            thresholds=thresholds.tolist(),
            xs=fpr.tolist(),
            ys=tpr.tolist(),
            area=roc_auc(fpr, tpr),
        )
        result.pr[label.value] = Curve(
            name=label.value,
            thresholds=thresholds.tolist(),
            xs=recall.tolist(),
            ys=precision.tolist(),
            area=average_precision(recall, precision),
        )

    if not defined:
        result.roc[MACRO] = Curve(name=MACRO, defined=False)
        result.pr[MACRO] = Curve(name=MACRO, defined=False)
        return result

    grid = _sweep(probs[:, defined].ravel())
    per_class = [_curves_on_grid(probs[:, c], truth == c, grid) for c in defined]
    fpr, tpr, recall, precision = (
        np.mean([curves[i] for curves in per_class], axis=0) for i in range(4)
    )
    result.roc[MACRO] = Curve(
        name=MACRO, thresholds=grid.tolist(), xs=fpr.tolist(), ys=tpr.tolist(),
        area=roc_auc(fpr, tpr),
    )
    result.pr[MACRO] = Curve(
        name=MACRO, thresholds=grid.tolist(), xs=recall.tolist(), ys=precision.tolist(),
        area=average_precision(recall, precision),
    )
    return result


def curves_frame(curves: Mapping[str, Curve]) -> pd.DataFrame:
    """Long-format (class, threshold, x, y) rows for defined curves"""
    rows = [
        {"class": name, "threshold": t, "x": x, "y": y}
        for name, curve in curves.items()
        if curve.defined
        for t, x, y in zip(curve.thresholds, curve.xs, curve.ys)
    ]
    return pd.DataFrame(rows, columns=["class", "threshold", "x", "y"])


def curve_areas(curves: OvrCurves) -> Dict[str, Dict[str, float]]:
    return {
        kind: {name: curve.area for name, curve in table.items() if curve.defined}
        for kind, table in (("roc_auc", curves.roc), ("average_precision", curves.pr))
    }
