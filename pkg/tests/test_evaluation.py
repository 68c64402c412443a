import itertools
import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from milexplain.evaluation import (
    compare_report,
    localization_auc,
    mann_whitney_u,
    relative_improvement,
    roc_auc,
)


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def enumerate_exact_p(a, b):
    """Two-sided p by listing every assignment of the pooled ranks to sample a."""
    n1, n2 = len(a), len(b)
    pooled = sorted(a + b)
    u_obs = sum(x > y for x in a for y in b)
    us = []
    for idx in itertools.combinations(range(n1 + n2), n1):
        aa = [pooled[i] for i in idx]
        bb = [pooled[i] for i in range(n1 + n2) if i not in idx]
        us.append(sum(x > y for x in aa for y in bb))
    us = np.array(us)
    lower = np.mean(us <= u_obs)
    upper = np.mean(us >= u_obs)
    return u_obs, min(1.0, 2 * min(lower, upper))


class TestRocAuc:
    def test_perfect(self):
        assert roc_auc([1, 2, 3, 4], [0, 0, 1, 1]).auc == 1.0

    def test_all_tied(self):
        assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]).auc == 0.5

    def test_single_class(self):
        with pytest.raises(ValueError, match="one class"):
            roc_auc([1, 2], [1, 1])

    def test_pairwise_oracle(self, rng):
        scores = rng.integers(0, 30, size=200).astype(float)  # plenty of ties
        labels = rng.integers(0, 2, size=200)
        assert roc_auc(scores, labels).auc == pairwise_auc(scores, labels)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.integers(-20, 20), st.integers(0, 1)), min_size=2, max_size=60))
    def test_pairwise_oracle_property(self, pairs):
        scores = [float(s) for s, _ in pairs]
        labels = [y for _, y in pairs]
        if len(set(labels)) < 2:
            return
        assert roc_auc(scores, labels).auc == pairwise_auc(scores, labels)

    def test_monotone_transform_invariance(self, rng):
        s = rng.normal(size=100)
        y = rng.integers(0, 2, size=100)
        assert roc_auc(s, y).auc == roc_auc(np.exp(3 * s) + 1, y).auc

    def test_complement(self, rng):
        s = rng.normal(size=80)
        y = rng.integers(0, 2, size=80)
        assert abs(roc_auc(s, y).auc + roc_auc(-s, y).auc - 1) < 1e-15


class TestMannWhitney:
    def test_small_exact(self):
        r = mann_whitney_u([1, 2], [3, 4])
        assert r.U == 0 and r.method == "exact"
        assert abs(r.p_value - 2 / 6) < 1e-15

    def test_identical_samples(self):
        r = mann_whitney_u([1, 2, 3, 4], [1, 2, 3, 4])
        assert r.p_value >= 0.99

    def test_separated_normals(self):
        rng = np.random.default_rng(0)
        r = mann_whitney_u(rng.normal(0, 1, 50), rng.normal(5, 1, 50))
        assert r.method == "normal" and r.p_value < 1e-3

    def test_empty(self):
        with pytest.raises(ValueError):
            mann_whitney_u([], [1.0])

    def test_exact_matches_enumeration_all_small_partitions(self):
        # every split of 1..n into two tie-free samples, n1 + n2 <= 8
        for n in range(2, 9):
            for n1 in range(1, n):
                for idx in itertools.combinations(range(1, n + 1), n1):
                    a = list(idx)
                    b = [v for v in range(1, n + 1) if v not in idx]
                    u, p = enumerate_exact_p(a, b)
                    r = mann_whitney_u(a, b)
                    assert r.method == "exact" and r.U == u
                    assert abs(r.p_value - p) < 1e-12

    def test_normal_branch_matches_scipy(self, rng):
        a = rng.integers(0, 10, size=30).astype(float)
        b = rng.integers(2, 12, size=25).astype(float)
        ours = mann_whitney_u(a, b)
        ref = scipy.stats.mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True)
        assert ours.U == ref.statistic
        assert abs(ours.p_value - ref.pvalue) < 1e-12

    def test_bounds(self, rng):
        a, b = rng.normal(size=7), rng.normal(size=9)
        r = mann_whitney_u(a, b)
        assert 0 <= r.U <= 63 and 0 < r.p_value <= 1


class TestLocalization:
    def test_ground_truth_heatmap(self):
        y = np.array([0, 1, 1, 0, -1])
        assert localization_auc(y.clip(0), y).auc == 1.0

    def test_constant_heatmap(self):
        assert localization_auc(np.full(4, 0.3), [0, 1, 1, 0]).auc == 0.5

    def test_unlabelled_tiles_are_skipped(self):
        r = localization_auc([0.9, 0.1, 0.5], [1, 0, -1])
        assert r.auc == 1.0 and r.n_pos + r.n_neg == 2

    def test_all_unlabelled(self):
        with pytest.raises(ValueError, match="no labelled"):
            localization_auc([0.1, 0.2], [-1, -1])

    def test_complement(self, rng):
        h = rng.uniform(size=50)
        y = rng.integers(0, 2, size=50)
        assert abs(localization_auc(h, y).auc + localization_auc(1 - h, y).auc - 1) < 1e-15


class TestReport:
    def test_minmax_cells(self):
        assert abs(relative_improvement(0.884, 0.684) - 29.2) < 0.1

    def test_attention_cells(self):
        assert abs(relative_improvement(0.739, 0.421) - 75.5) < 0.1

    def test_equal(self):
        assert relative_improvement(0.7, 0.7) == 0.0

    def test_structure(self):
        rep = compare_report(
            [
                {"model": "minmax", "classification_auc": 0.82, "localization": {"tile_scores": 0.684, "feature_based": 0.884}},
                {"model": "attention", "classification_auc": 0.83, "localization": {"tile_scores": 0.421, "feature_based": 0.739}},
            ]
        )
        rows = {(r["model"], r["method"]): r for r in rep["rows"]}
        assert set(rows["minmax", "feature_based"]) == {
            "model", "classification_auc", "method", "localization_auc", "relative_improvement"
        }
        assert rows["minmax", "tile_scores"]["relative_improvement"] == 0.0
        assert math.isclose(rows["attention", "feature_based"]["relative_improvement"], (0.739 - 0.421) / 0.421 * 100)

    def test_missing_baseline(self):
        rep = compare_report([{"model": "m", "localization": {"feature_based": 0.9}}])
        assert rep["rows"][0]["relative_improvement"] is None
