import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import average_precision_score, roc_auc_score

from catchfm.metrics import (
    MetricError, auprc, auroc, bootstrap_ci, evaluate, operational_point, relative_risk, row_at_threshold,
    sensitivity_at_specificity, threshold_table,
)


def brute_auroc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def brute_ap(s, y):
    total = 0.0
    for i in np.nonzero(y == 1)[0]:
        flagged = s >= s[i]
        total += (y[flagged] == 1).sum() / flagged.sum()
    return total / (y == 1).sum()


cohorts = st.integers(2, 60).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 8), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
)).filter(lambda t: 0 < sum(t[1]) < len(t[1]))


def test_worked_example():
    s, y = [0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]
    assert auroc(s, y) == 0.75
    assert auprc(s, y) == pytest.approx((1 + 2 / 3) / 2, abs=1e-15)


def test_trivial_cases():
    assert auroc([0.1, 0.2, 0.9, 0.8], [0, 0, 1, 1]) == 1.0
    assert auprc([0.1, 0.2, 0.9, 0.8], [0, 0, 1, 1]) == 1.0
    assert auroc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


@pytest.mark.parametrize("fn", [auroc, auprc, threshold_table])
def test_single_class_is_an_error(fn):
    with pytest.raises(MetricError, match="single-class"):
        fn([0.1, 0.2], [1, 1])


@settings(max_examples=200, deadline=None)
@given(cohorts)
def test_against_brute_force(cohort):
    s, y = np.array(cohort[0], dtype=float) / 8, np.array(cohort[1])
    assert abs(auroc(s, y) - brute_auroc(s, y)) < 1e-12
    assert abs(auprc(s, y) - brute_ap(s, y)) < 1e-12
    assert auroc(s, y) == pytest.approx(roc_auc_score(y, s), abs=1e-12)
    assert auprc(s, y) == pytest.approx(average_precision_score(y, s), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(cohorts)
def test_monotone_transform_invariance(cohort):
    s, y = np.array(cohort[0], dtype=float), np.array(cohort[1])
    t = np.exp(s / 3) * 7 + 1
    assert auroc(t, y) == auroc(s, y) and auprc(t, y) == auprc(s, y)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 80), st.integers(0, 2**32 - 1))
def test_auroc_complement_without_ties(n, seed):
    rng = np.random.default_rng(seed)
    s = rng.permutation(n).astype(float)
    y = np.r_[1, 0, rng.integers(0, 2, n - 2)]
    assert auroc(s, y) + auroc(-s, y) == pytest.approx(1.0, abs=1e-12)


def test_random_scores_give_ap_near_prevalence():
    # Monte-Carlo oracle: with uninformative scores precision is flat at the prevalence
    rng = np.random.default_rng(0)
    y = (rng.random(200_000) < 0.05).astype(int)
    assert abs(auprc(rng.random(len(y)), y) - y.mean()) < 0.005


def test_rows_descend_and_satisfy_identities():
    rng = np.random.default_rng(1)
    s, y = rng.random(300).round(2), (rng.random(300) < 0.2).astype(int)
    rows = threshold_table(s, y)
    assert all(a.threshold > b.threshold for a, b in zip(rows, rows[1:]))
    prev = y.mean()
    for r in rows:
        assert r.specificity == 1 - r.fpr
        assert r.relative_risk == r.precision / prev


def test_perfect_separation_gives_full_sensitivity():
    s = np.r_[np.linspace(0.6, 1, 10), np.linspace(0, 0.5, 200)]
    y = np.r_[np.ones(10), np.zeros(200)].astype(int)
    assert sensitivity_at_specificity(s, y)[1] == 1.0


def test_hundred_negatives_allow_one_false_positive():
    s = np.r_[0.95, 0.9, 0.8, 0.7, np.linspace(0, 0.6, 98)]
    y = np.r_[1, 0, 1, 0, np.zeros(98)].astype(int)
    assert (y == 0).sum() == 100
    thr, sens = sensitivity_at_specificity(s, y)
    assert (thr, sens) == (0.8, 1.0)
    assert row_at_threshold(s, y, thr).fp == 1


def test_unreachable_floor_explains_itself():
    with pytest.raises(MetricError, match="need at least 100"):
        sensitivity_at_specificity(np.arange(60.0), np.r_[np.ones(10), np.zeros(50)].astype(int))


def test_threshold_reuse_on_another_cohort():
    rng = np.random.default_rng(2)
    s, y = rng.random(500), (rng.random(500) < 0.1).astype(int)
    report = evaluate(s, y, threshold=0.5)
    assert report.threshold == 0.5
    assert report.at_threshold == row_at_threshold(s, y, 0.5)


def test_relative_risk_values():
    assert relative_risk(0.495, 452 / 28510) == pytest.approx(31.196, rel=0.02)
    assert relative_risk(0.3, 0.3) == 1.0
    assert relative_risk(1.0, 0.5) == 2.0
    assert relative_risk(None, 0.1) is None


def test_operational_point_counts_and_ties():
    rng = np.random.default_rng(3)
    s, y = rng.random(10_000), (rng.random(10_000) < 0.02).astype(int)
    row = operational_point(s, y, 0.001)
    assert row.tp + row.fp == 10
    top10 = np.argsort(-s)[:10]
    assert row.tp == y[top10].sum() and row.threshold == s[top10].min()
    tied = np.r_[np.ones(5), np.zeros(995)]
    labels = np.r_[0, 1, 0, 1, 1, np.zeros(995)].astype(int)
    labels[-1] = 1
    row = operational_point(tied, labels, 0.002)  # k = 2 of the 5 tied top scores, by index
    assert (row.tp, row.fp) == (1, 1)


def test_operational_point_needs_enough_patients():
    with pytest.raises(MetricError):
        operational_point(np.arange(50.0), np.r_[np.ones(5), np.zeros(45)].astype(int), 0.001)


def test_bootstrap_interval_brackets_point_estimate():
    rng = np.random.default_rng(4)
    y = (rng.random(800) < 0.1).astype(int)
    s = y * 0.8 + rng.random(800)
    lo, hi = bootstrap_ci(auroc, s, y, n_resamples=200, seed=1)
    assert lo <= auroc(s, y) <= hi
    assert bootstrap_ci(auroc, s, y, n_resamples=50, seed=1) == bootstrap_ci(auroc, s, y, n_resamples=50, seed=1)


def test_report_dict_has_rows_and_summary():
    rng = np.random.default_rng(5)
    s, y = rng.random(2000), (rng.random(2000) < 0.05).astype(int)
    d = evaluate(s, y).to_dict()
    assert {"auroc", "auprc", "at_threshold", "operational", "rows"} <= set(d)
    assert math.isclose(d["prevalence"], y.mean())
