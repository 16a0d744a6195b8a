"""Binary classification metrics: accuracy, ROC AUC and per-class F1."""

from typing import Optional

import numpy as np


def confusion(y_true, y_pred):
    """``(tn, fp, fn, tp)`` treating class 1 as positive."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    tp = int(np.sum((y_true == 1) & (y_pred == 1)))
    tn = int(np.sum((y_true == 0) & (y_pred == 0)))
    fp = int(np.sum((y_true == 0) & (y_pred == 1)))
    fn = int(np.sum((y_true == 1) & (y_pred == 0)))
    return tn, fp, fn, tp


def f1_per_class(y_true, y_pred):
    tn, fp, fn, tp = confusion(y_true, y_pred)

    def f1(t, f_pos, f_neg):
        denom = 2 * t + f_pos + f_neg
        return 0.0 if denom == 0 or t == 0 else 2 * t / denom

    return f1(tn, fn, fp), f1(tp, fp, fn)


def accuracy(y_true, y_pred):
    y_true = np.asarray(y_true)
    return float(np.mean(y_true == np.asarray(y_pred)))


def roc_auc(y_true, scores) -> Optional[float]:
    """Trapezoidal area under the ROC curve of class-1 scores.

    Tied scores form a single ROC step, which is what makes the trapezoid
    agree with counting tied pairs as one half. Returns None when only one
    class is present.
    """
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(np.sum(y_true == 1))
    n_neg = int(np.sum(y_true == 0))
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    pos = (y_true[order] == 1).astype(np.int64)
    last_of_tie = np.r_[np.flatnonzero(s[1:] != s[:-1]), len(s) - 1]
    tps = np.cumsum(pos)[last_of_tie]
    fps = (last_of_tie + 1) - tps
    tpr = np.r_[0, tps] / n_pos
    fpr = np.r_[0, fps] / n_neg
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def evaluate_scores(y_true, probs):
    """Metrics from ``[M, 2]`` class probabilities."""
    probs = np.asarray(probs)
    y_pred = probs.argmax(axis=1)
    f1_0, f1_1 = f1_per_class(y_true, y_pred)
    return {
        "acc": accuracy(y_true, y_pred),
        "auc": roc_auc(y_true, probs[:, 1]),
        "f1_0": f1_0,
        "f1_1": f1_1,
    }
