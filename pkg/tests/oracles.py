"""Slow, obviously-correct reference implementations used as test oracles."""
import numpy as np


def auroc_pairs(scores, labels):
    """Fraction of (positive, negative) pairs ranked correctly, ties counting one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def average_precision_pairs(scores, labels):
    """AP by walking the distinct thresholds from high to low, O(n^2)."""
    P = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        sel = [y for s, y in zip(scores, labels) if s >= t]
        tp = sum(sel)
        recall = tp / P
        ap += (recall - prev_recall) * (tp / len(sel))
        prev_recall = recall
    return ap


def split_gain_scan(X, r):
    """Best squared-error reduction over every (feature, threshold, NaN side)."""
    n, d = X.shape
    total = r.sum() ** 2 / n
    best = -np.inf
    for f in range(d):
        col = X[:, f]
        vals = np.unique(col[~np.isnan(col)])
        for lo, hi in zip(vals[:-1], vals[1:]):
            thr = lo + (hi - lo) / 2
            for nan_left in (True, False):
                left = (col <= thr) | (np.isnan(col) & nan_left)
                nl = left.sum()
                if nl == 0 or nl == n:
                    continue
                g = r[left].sum() ** 2 / nl + r[~left].sum() ** 2 / (n - nl) - total
                best = max(best, g)
    return best
