"""ROC AUC, sensitivity-constrained operating points, McNemar tests and bootstrap spreads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
from scipy import stats

from .errors import UndefinedMetric

SENSITIVITY_FLOOR = 0.96
ALPHA = 0.05
# disagreement counts below this use the exact binomial test instead of chi-square
EXACT_BELOW = 10


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores {s.shape} and labels {y.shape} must be equal-length 1-D")
    return s, y


def roc_auc(scores, labels) -> float:
    """Mann-Whitney estimate ``P(pos > neg) + 0.5 P(tie)`` via midranks."""
    s, y = _as_arrays(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs both classes")
    ranks = stats.rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels) -> list:
    """``(threshold, fpr, tpr)`` points from the all-negative to the all-positive end."""
    s, y = _as_arrays(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("ROC needs both classes")
    points = [(math.inf, 0.0, 0.0)]
    for t in np.unique(s[np.isfinite(s)])[::-1]:
        pred = s >= t
        points.append((float(t), float((pred & ~y).sum() / n_neg), float((pred & y).sum() / n_pos)))
    return points


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    sensitivity: float
    specificity: float
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int
    flag: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["threshold"] = _finite_or_str(self.threshold)
        return d


def _finite_or_str(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def predict_positive(scores, threshold: float) -> np.ndarray:
    """``score >= threshold``; the benign sentinel ``-inf`` is never positive."""
    s = np.asarray(scores, dtype=np.float64)
    return np.isfinite(s) & (s >= threshold)


def operating_point(scores, labels, threshold: float, flag: str = "") -> OperatingPoint:
    s, y = _as_arrays(scores, labels)
    pred = predict_positive(s, threshold)
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    tn = int((~pred & ~y).sum())
    fn = int((~pred & y).sum())
    n_pos, n_neg = tp + fn, tn + fp
    return OperatingPoint(float(threshold), tp / n_pos if n_pos else math.nan,
                          tn / n_neg if n_neg else math.nan, (tp + tn) / len(s), tp, fp, tn, fn, flag)


def threshold_at_sensitivity(scores, labels, floor: float = SENSITIVITY_FLOOR) -> OperatingPoint:
    """Highest threshold (hence best specificity) whose sensitivity reaches ``floor``.

    With ``floor <= 0`` the all-negative point is returned flagged ``degenerate_floor``;
    when no finite threshold reaches the floor the maximum-sensitivity point is
    returned flagged ``floor_unachievable``.
    """
    s, y = _as_arrays(scores, labels)
    if y.sum() == 0:
        raise UndefinedMetric("sensitivity needs positives")
    if floor <= 0:
        return operating_point(s, y, math.inf, "degenerate_floor")
    candidates = np.unique(s[np.isfinite(s)])[::-1]
    n_pos = int(y.sum())
    for t in candidates:
        if (predict_positive(s, t) & y).sum() / n_pos >= floor:
            return operating_point(s, y, float(t))
    if candidates.size == 0:
        return operating_point(s, y, math.inf, "floor_unachievable")
    return operating_point(s, y, float(candidates[-1]), "floor_unachievable")


@dataclass(frozen=True)
class McNemarResult:
    b: int
    c: int
    statistic: float
    p_value: float
    significant: bool
    method: str

    def to_dict(self) -> dict:
        return asdict(self)


def mcnemar_counts(b: int, c: int, alpha: float = ALPHA, exact_below: int = EXACT_BELOW) -> McNemarResult:
    """Continuity-corrected McNemar test on the discordant counts ``b`` and ``c``."""
    n = b + c
    if n == 0:
        return McNemarResult(b, c, 0.0, 1.0, False, "none")
    stat = max(abs(b - c) - 1, 0) ** 2 / n
    if n < exact_below:
        p = min(1.0, 2.0 * stats.binom.cdf(min(b, c), n, 0.5))
        method = "exact_binomial"
    else:
        p = float(stats.chi2.sf(stat, 1))
        method = "chi2_continuity"
    return McNemarResult(int(b), int(c), float(stat), float(p), bool(p < alpha), method)


def mcnemar(pred_a, pred_b, labels, t_a: float, t_b: float, alpha: float = ALPHA,
            exact_below: int = EXACT_BELOW) -> McNemarResult:
    """Compare the specificities of two scorers, each thresholded at its own ``t_c``.

    Only benign cases enter the table: ``b`` counts cases A clears and B flags,
    ``c`` the reverse.
    """
    y = np.asarray(labels).astype(bool)
    neg = ~y
    a_ok = ~predict_positive(pred_a, t_a)[neg]
    b_ok = ~predict_positive(pred_b, t_b)[neg]
    return mcnemar_counts(int((a_ok & ~b_ok).sum()), int((~a_ok & b_ok).sum()), alpha, exact_below)


def bootstrap_sd(metric: Callable[[np.ndarray, np.ndarray], float], scores, labels,
                 n_boot: int = 1000, seed: int = 0) -> float:
    """Standard deviation of ``metric`` over patient-level bootstrap resamples.

    Resamples lacking a class are skipped.
    """
    s, y = _as_arrays(scores, labels)
    rng = np.random.Generator(np.random.PCG64(seed))
    vals = []
    n = len(s)
    for _ in range(n_boot):
        idx = rng.integers(0, n, n)
        yy = y[idx]
        if yy.all() or not yy.any():
            continue
        vals.append(metric(s[idx], yy))
    return float(np.std(vals, ddof=1)) if len(vals) > 1 else math.nan
