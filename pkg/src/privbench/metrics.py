"""ROC/AUC, true-positive rate at a fixed false-positive rate, and metric tables."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from privbench.errors import MetricError

METRIC_COLUMNS = ("AUC", "TPR@0.1%", "TPR@1%", "Pre", "Rec", "F1")


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError("scores and labels must be 1-d arrays of equal length")
    if not np.all(np.isfinite(s)):
        raise MetricError("scores must be finite")
    if y.all() or not y.any():
        raise MetricError("both members and non-members are required")
    return s, y


def auc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Mann-Whitney AUC: P(pos > neg) + 0.5 P(tie)."""
    s, y = _validate(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    ranks = rankdata(s)  # average ranks handle ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def roc_curve(scores: Sequence[float], labels: Sequence[bool]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds) for the rule ``score >= threshold``, thresholds descending from +inf."""
    s, y = _validate(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    tp = np.cumsum(y_sorted)[last]
    fp = np.cumsum(~y_sorted)[last]
    tpr = np.r_[0.0, tp / y.sum()]
    fpr = np.r_[0.0, fp / (~y).sum()]
    return fpr, tpr, np.r_[math.inf, s_sorted[last]]


def trapezoid_auc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(np.trapezoid(tpr, fpr))


def tpr_at_fpr(scores: Sequence[float], labels: Sequence[bool], fpr_target: float) -> float:
    """Largest TPR over thresholds whose FPR does not exceed `fpr_target`.

    Ties are never split: all points sharing a score fall on the same side,
    so a block of tied negatives that would overshoot the target is excluded
    along with the positives tied to it.
    """
    if not 0 < fpr_target <= 1:
        raise MetricError("fpr target must lie in (0, 1]")
    s, y = _validate(scores, labels)
    n_neg = int((~y).sum())
    if fpr_target * n_neg < 1 - 1e-9:
        need = math.ceil(1 / fpr_target - 1e-9)
        raise MetricError(f"fpr target {fpr_target} needs at least {need} non-members, got {n_neg}")
    fpr, tpr, _ = roc_curve(s, y)
    ok = fpr <= fpr_target + 1e-12
    return float(tpr[ok].max())


def precision_recall_f1(overlap: int, predicted: int, reference: int) -> tuple[float, float, float]:
    p = overlap / predicted if predicted else 0.0
    r = overlap / reference if reference else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def mia_metrics(scores: Sequence[float], labels: Sequence[bool]) -> dict[str, float]:
    """AUC and TPR at 0.1% / 1% FPR; TPR entries are NaN when there are too few non-members."""
    out = {"AUC": auc(scores, labels)}
    for key, target in (("TPR@0.1%", 0.001), ("TPR@1%", 0.01)):
        try:
            out[key] = tpr_at_fpr(scores, labels, target)
        except MetricError:
            out[key] = math.nan
    return out


def format_percent(value: float | None) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    return f"{100 * value:.2f}"


def write_metrics_csv(rows: Sequence[dict], path: str | Path, leading: Sequence[str] = ()) -> None:
    """One row per run; metric values are written as percentages with two decimals."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*leading, *METRIC_COLUMNS])
        for row in rows:
            w.writerow([row.get(k, "") for k in leading] + [format_percent(row.get(k)) for k in METRIC_COLUMNS])
