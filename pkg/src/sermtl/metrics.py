"""Evaluation metrics: confusion matrices, unweighted accuracy, and the
Wilcoxon signed-rank paired test (exact for small n, normal approximation
with continuity correction otherwise)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EXACT_WILCOXON_MAX_N = 20


def confusion_matrix(true_labels, predicted_labels, n_classes: int = 4) -> np.ndarray:
    """Counts[i, j] = number of samples with true class i predicted as class j."""
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise ValueError("label vectors must be 1-D and of equal length")
    if t.size and (t.min() < 0 or t.max() >= n_classes or p.min() < 0 or p.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return counts


def per_class_recall(cm: np.ndarray) -> list[float | None]:
    """Diagonal over row sums; None for classes absent from the test set."""
    cm = np.asarray(cm)
    out: list[float | None] = []
    for i in range(cm.shape[0]):
        row = cm[i].sum()
        out.append(float(cm[i, i] / row) if row > 0 else None)
    return out


def unweighted_accuracy(cm: np.ndarray) -> float:
    """Mean recall over the classes present in the test set."""
    recalls = [r for r in per_class_recall(cm) if r is not None]
    if not recalls:
        raise ValueError("confusion matrix has no populated rows")
    return float(np.mean(recalls))


@dataclass(frozen=True)
class WilcoxonResult:
    w_plus: float
    w_minus: float
    n: int
    p_value: float
    significant: bool
    method: str


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j + 2) / 2.0  # mean of 1-based positions
        i = j + 1
    return ranks


def _exact_two_sided_p(ranks: np.ndarray, w_plus: float) -> float:
    """Exact two-sided p over all 2^n sign assignments of the observed ranks.

    Computed by dynamic programming over doubled ranks (ties give half-integer
    ranks, so doubling keeps everything integral); the resulting distribution
    is identical to full enumeration.
    """
    doubled = np.rint(2.0 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        r = int(r)
        counts[r:] += counts[: total + 1 - r].copy()
    observed = int(round(2.0 * w_plus))
    deviation = abs(2 * observed - total)
    sums = np.arange(total + 1)
    tail = counts[np.abs(2 * sums - total) >= deviation].sum()
    return float(tail / 2.0 ** len(ranks))


def wilcoxon_signed_rank(scores_a, scores_b, alpha: float = 0.05) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired scores.

    Zero differences are dropped and tied absolute differences receive
    averaged ranks. For n <= 20 the p-value is exact over all sign
    assignments; beyond that a normal approximation with continuity
    correction (and the usual tie correction) is used.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired score vectors must be 1-D and of equal length")
    diffs = a - b
    diffs = diffs[diffs != 0.0]
    n = diffs.size
    if n == 0:
        raise ValueError("all differences zero")
    abs_diffs = np.abs(diffs)
    ranks = _average_ranks(abs_diffs)
    w_plus = float(ranks[diffs > 0].sum())
    w_minus = float(ranks[diffs < 0].sum())

    if n <= EXACT_WILCOXON_MAX_N:
        p = _exact_two_sided_p(ranks, w_plus)
        method = "exact"
    else:
        mu = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        _, tie_counts = np.unique(abs_diffs, return_counts=True)
        var -= float(np.sum(tie_counts**3 - tie_counts)) / 48.0
        if var <= 0:
            raise ValueError("degenerate rank variance")
        dev = w_plus - mu
        z = (dev - 0.5 * np.sign(dev)) / math.sqrt(var)
        p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
        method = "normal"
    return WilcoxonResult(
        w_plus=w_plus,
        w_minus=w_minus,
        n=n,
        p_value=p,
        significant=bool(p < alpha),
        method=method,
    )
