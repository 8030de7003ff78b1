"""Brute-force reference implementations used as test oracles."""

import math
from fractions import Fraction

import numpy as np


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = Fraction(0)
    for p in pos:
        for n in neg:
            total += 1 if p > n else (Fraction(1, 2) if p == n else 0)
    return float(total / (len(pos) * len(neg)))


def sweep_threshold(scores, labels, floor):
    """Exhaustive sweep over every observed score: best specificity with sensitivity >= floor.

    Ties in specificity go to the higher threshold. Returns (threshold, spec, sens).
    """
    s = np.asarray(scores, float)
    y = np.asarray(labels).astype(bool)
    best = None
    for t in sorted(set(s[np.isfinite(s)].tolist())):
        pred = s >= t
        sens = (pred & y).sum() / y.sum()
        spec = (~pred & ~y).sum() / (~y).sum()
        if sens >= floor and (best is None or spec >= best[1]):
            best = (t, spec, sens)
    return best


def enumerate_fold_sets(folds):
    return [(set(f.train), set(f.val), set(f.test)) for f in folds]
