import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import exact_binomial_two_sided, sign_flip_midp
from scipy import stats as sps

from glioma25d.errors import DataError
from glioma25d.metrics import auroc
from glioma25d.stats import chi_square_independence, delong, gss_paired_proportions, mann_whitney, mcnemar


def _pairs(b, c, same_right=3, same_wrong=2):
    a = [1] * b + [0] * c + [1] * same_right + [0] * same_wrong
    bb = [0] * b + [1] * c + [1] * same_right + [0] * same_wrong
    return np.array(a), np.array(bb)


def test_mcnemar_identical_predictions():
    a = np.array([1, 0, 1, 1, 0])
    r = mcnemar(a, a)
    assert r.statistic == 0.0 and r.p_value == 1.0


def test_mcnemar_statistic_exact_value():
    a, b = _pairs(5, 1)
    r = mcnemar(a, b)
    assert r.statistic == 16 / 6
    assert r.method == "mcnemar-exact"
    assert r.p_value == pytest.approx(exact_binomial_two_sided(5, 1), abs=1e-12)


def test_mcnemar_large_sample_uses_chi2():
    a, b = _pairs(30, 10)
    r = mcnemar(a, b)
    assert r.method == "mcnemar-chi2"
    assert r.p_value == pytest.approx(sps.chi2.sf(400 / 40, 1))


def test_mcnemar_one_sided_discordance():
    a, b = _pairs(0, 10)
    assert mcnemar(a, b).p_value == pytest.approx(2 * 0.5 ** 10)


def test_mcnemar_rejects_non_binary():
    with pytest.raises(DataError):
        mcnemar([0, 2], [1, 1])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 15), st.integers(0, 15))
def test_mcnemar_exact_matches_binomial_enumeration(b, c):
    if b + c == 0:
        return
    a, bb = _pairs(b, c)
    r = mcnemar(a, bb, exact=True)
    assert r.p_value == pytest.approx(exact_binomial_two_sided(b, c), abs=1e-12)
    if b + c < 25:
        assert mcnemar(a, bb).p_value == r.p_value


def test_gss_reduces_to_mcnemar_for_shared_subset():
    rng = np.random.default_rng(0)
    a = rng.random(40) < 0.7
    b = rng.random(40) < 0.5
    g = gss_paired_proportions(a, b)
    m = mcnemar(a, b, exact=False)
    assert g.statistic == pytest.approx(m.statistic, rel=1e-12)


def test_gss_identical_outcomes():
    a = np.array([1, 1, 0, 1])
    r = gss_paired_proportions(a, a)
    assert r.statistic == 0.0 and r.p_value == 1.0


def test_gss_close_to_sign_flip_oracle():
    a, b = _pairs(10, 2, same_right=6, same_wrong=2)
    g = gss_paired_proportions(a, b)
    assert g.p_value == pytest.approx(sign_flip_midp(10, 2), abs=0.02)


def test_gss_predictive_value_subsets():
    # different observation sets per method; swapping roles flips the estimate sign only
    rng = np.random.default_rng(1)
    ya, yb = rng.random(50) < 0.6, rng.random(50) < 0.4
    ia, ib = rng.random(50) < 0.7, rng.random(50) < 0.6
    r1 = gss_paired_proportions(ya, yb, ia, ib)
    r2 = gss_paired_proportions(yb, ya, ib, ia)
    assert r1.statistic == pytest.approx(r2.statistic)
    assert r1.estimate == pytest.approx(-r2.estimate)
    with pytest.raises(DataError):
        gss_paired_proportions(ya, yb, np.zeros(50, bool), ib)


def test_delong_identical_scores():
    rng = np.random.default_rng(2)
    y = np.r_[np.ones(10, int), np.zeros(12, int)]
    s = rng.random(22)
    r = delong(s, s, y)
    assert r.p_value == 1.0 and r.statistic == 0.0


def test_delong_aucs_match_rank_auc():
    rng = np.random.default_rng(5)
    y = (rng.random(50) < 0.5).astype(int)
    sa, sb = y + rng.normal(size=50), rng.normal(size=50)
    r = delong(sa, sb, y)
    assert abs(r.auc_a - auroc(sa, y)) < 1e-12
    assert abs(r.auc_b - auroc(sb, y)) < 1e-12
    assert r.auc_a - r.auc_b == pytest.approx(r.estimate)


def test_delong_antisymmetric():
    rng = np.random.default_rng(6)
    y = (rng.random(30) < 0.5).astype(int)
    sa, sb = y + rng.normal(size=30), 0.5 * y + rng.normal(size=30)
    r1, r2 = delong(sa, sb, y), delong(sb, sa, y)
    assert r1.statistic == pytest.approx(-r2.statistic)
    assert r1.p_value == pytest.approx(r2.p_value)


def test_delong_single_class_raises():
    with pytest.raises(DataError):
        delong([0.1, 0.2], [0.2, 0.3], [1, 1])


def test_chi_square_matches_scipy():
    table = [[10, 20, 5], [7, 3, 12]]
    r = chi_square_independence(table)
    ref = sps.chi2_contingency(table, correction=False)
    assert r.statistic == pytest.approx(ref[0])
    assert r.p_value == pytest.approx(ref[1])


def test_mann_whitney_matches_scipy():
    rng = np.random.default_rng(4)
    x, y = rng.integers(0, 8, 25), rng.integers(2, 10, 30)
    r = mann_whitney(x, y)
    ref = sps.mannwhitneyu(x, y, alternative="two-sided", method="asymptotic", use_continuity=True)
    assert r.statistic == pytest.approx(ref.statistic)
    assert r.p_value == pytest.approx(ref.pvalue)
    assert not math.isnan(r.estimate)
