"""Classification metrics: rank AUC, F1 and accuracy."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, MetricsError


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted as 1/2."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ContractError(f"{s.shape[0]} scores for {y.shape[0]} labels")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != y.shape[0]:
        raise MetricsError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise MetricsError(f"AUC needs both classes (positives: {n_pos}, negatives: {n_neg})")
    ranks = rankdata(s)  # midranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def f1_scores(pred, true) -> dict[str, float]:
    """Accuracy, positive-class F1 and macro F1 over the classes present.

    A class that appears neither in ``true`` nor in ``pred`` is left out of
    the macro average.
    """
    p = np.asarray(pred).reshape(-1)
    t = np.asarray(true).reshape(-1)
    if p.shape != t.shape or p.size == 0:
        raise ContractError(f"need equal, nonempty label vectors (got {p.size} and {t.size})")
    per_class = {}
    for c in (0, 1):
        tp = int(((p == c) & (t == c)).sum())
        fp = int(((p == c) & (t != c)).sum())
        fn = int(((p != c) & (t == c)).sum())
        if tp + fp + fn:
            per_class[c] = _f1(tp, fp, fn)
    return {
        "acc": float((p == t).mean()),
        "f1_binary": per_class.get(1, 0.0),
        "f1_macro": float(np.mean(list(per_class.values()))) if per_class else 0.0,
    }


def f1_acc(pred, true) -> tuple[float, float]:
    """(macro F1, accuracy)."""
    m = f1_scores(pred, true)
    return m["f1_macro"], m["acc"]


def dice(a, b) -> float:
    """Dice overlap of two boolean masks (1.0 when both are empty)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    total = int(a.sum() + b.sum())
    return 2.0 * int((a & b).sum()) / total if total else 1.0
