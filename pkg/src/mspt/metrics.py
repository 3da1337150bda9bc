"""Evaluation metrics on plain numpy arrays."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

ZERO_NORM_EPS = 1e-12


def relative_l2(pred, target):
    """Relative L2 error ||pred - target|| / ||target|| over all elements."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"relative_l2: shapes {pred.shape} and {target.shape} differ")
    num = np.linalg.norm((pred - target).ravel())
    den = np.linalg.norm(target.ravel())
    return float(num / max(den, ZERO_NORM_EPS))


def mean_relative_l2(preds, targets):
    """Mean of per-sample relative L2 errors over the leading axis."""
    preds = np.asarray(preds)
    targets = np.asarray(targets)
    if preds.shape != targets.shape:
        raise ShapeError(
            f"mean_relative_l2: shapes {preds.shape} and {targets.shape} differ"
        )
    if preds.ndim < 2:
        raise ShapeError("mean_relative_l2 needs a leading sample axis")
    flat_p = preds.reshape(preds.shape[0], -1)
    flat_t = targets.reshape(targets.shape[0], -1)
    num = np.linalg.norm(flat_p - flat_t, axis=1)
    den = np.maximum(np.linalg.norm(flat_t, axis=1), ZERO_NORM_EPS)
    return float(np.mean(num / den))


def _midranks(x):
    # Average rank for ties, 1-based.
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(a, b):
    """Rank correlation with midranks for ties.

    Returns nan when either input is constant, since ranks carry no
    information there.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"spearman_rho: lengths {a.size} and {b.size} differ")
    if a.size < 2:
        raise ShapeError("spearman_rho needs at least two points")
    ra, rb = _midranks(a), _midranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom == 0.0:
        return float("nan")
    return float((ra * rb).sum() / denom)
