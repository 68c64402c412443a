"""Rank statistics: ROC AUC, Mann-Whitney U, localization AUC and method reports."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.stats import norm, rankdata

EXACT_MAX_TOTAL = 20


@dataclass(frozen=True)
class RocResult:
    auc: float
    n_pos: int
    n_neg: int


@dataclass(frozen=True)
class MwuResult:
    U: float
    p_value: float
    method: str  # "exact" or "normal"


def roc_auc(scores, labels) -> RocResult:
    """AUC as P(s_pos > s_neg) + 0.5 P(s_pos == s_neg), via the rank-sum identity."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined when only one class is present")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return RocResult(float(u / (n_pos * n_neg)), n_pos, n_neg)


@lru_cache(maxsize=None)
def _u_counts(n1: int, n2: int) -> tuple[int, ...]:
    """Number of rankings giving each value of U (0..n1*n2) for tie-free samples."""
    # f[m][n][u] recurrence: the largest element belongs to sample 1 or sample 2
    if n1 == 0 or n2 == 0:
        return (1,)
    a = _u_counts(n1 - 1, n2)  # largest in sample 1: it beats all n2
    b = _u_counts(n1, n2 - 1)
    out = [0] * (n1 * n2 + 1)
    for u, c in enumerate(a):
        out[u + n2] += c
    for u, c in enumerate(b):
        out[u] += c
    return tuple(out)


def _exact_p(u: float, n1: int, n2: int) -> float:
    counts = _u_counts(n1, n2)
    total = math.comb(n1 + n2, n1)
    k = int(round(u))
    lower = sum(counts[: k + 1]) / total
    upper = sum(counts[k:]) / total
    return min(1.0, 2.0 * min(lower, upper))


def mann_whitney_u(sample_a, sample_b) -> MwuResult:
    """Two-sided Mann-Whitney U test; U counts pairs where a beats b (ties count 1/2).

    Exact null distribution for tie-free data with n1 + n2 <= 20, otherwise the
    normal approximation with tie and continuity corrections.
    """
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    n1, n2 = a.size, b.size
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    has_ties = np.unique(pooled).size < pooled.size
    if n1 + n2 <= EXACT_MAX_TOTAL and not has_ties:
        return MwuResult(u, _exact_p(u, n1, n2), "exact")

    n = n1 + n2
    _, tie_sizes = np.unique(pooled, return_counts=True)
    tie_term = float((tie_sizes**3 - tie_sizes).sum()) / (n * (n - 1)) if n > 1 else 0.0
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return MwuResult(u, 1.0, "normal")
    dev = max(abs(u - n1 * n2 / 2.0) - 0.5, 0.0)
    p = 2.0 * norm.sf(dev / math.sqrt(var))
    return MwuResult(u, float(min(1.0, p)), "normal")


def localization_auc(values, tile_labels) -> RocResult:
    """Pooled tile-level AUC of a heat-map against ground truth; label -1 is skipped."""
    values = np.asarray(values, dtype=np.float64).ravel()
    tile_labels = np.asarray(tile_labels).ravel()
    known = tile_labels >= 0
    if not known.any():
        raise ValueError("no labelled tiles to evaluate")
    return roc_auc(values[known], tile_labels[known])


def relative_improvement(new: float, old: float) -> float:
    """Percentage change ``(new - old) / old * 100``."""
    if old == 0:
        raise ZeroDivisionError("baseline AUC is zero")
    return (new - old) / old * 100.0


def compare_report(runs: Sequence[dict], baseline: str = "tile_scores") -> dict:
    """Table of classification and localization AUCs per model and heat-map method.

    Each run is ``{"model": str, "classification_auc": float | None,
    "localization": {method: auc}}``. Every method row carries its improvement
    over the ``baseline`` method of the same model (None if there is no baseline).
    """
    rows = []
    for run in runs:
        loc = run.get("localization", {})
        base = loc.get(baseline)
        for method, auc in loc.items():
            rows.append(
                {
                    "model": run["model"],
                    "classification_auc": run.get("classification_auc"),
                    "method": method,
                    "localization_auc": auc,
                    "relative_improvement": None if base is None else relative_improvement(auc, base),
                }
            )
    return {"baseline_method": baseline, "rows": rows}
