"""Paired and unpaired hypothesis tests for classifier comparison and cohort description."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .errors import DataError
from .metrics import _check_binary, midrank


@dataclass
class TestResult:
    statistic: float
    p_value: float
    estimate: float
    method: str
    degenerate: bool = False

    __test__ = False  # keep pytest from collecting this as a test class


def _binary(x, name):
    a = np.asarray(x)
    if a.dtype != bool and not np.isin(a, (0, 1)).all():
        raise DataError(f"{name} must be binary")
    return a.astype(int)


def mcnemar(correct_a, correct_b, exact: str | bool = "auto",
            continuity: bool = False) -> TestResult:
    """McNemar test on paired binary outcomes.

    ``b`` counts cases where A is right and B wrong, ``c`` the reverse.
    The statistic is always (b-c)^2/(b+c) (optionally continuity-corrected).
    With ``exact="auto"`` the p-value switches to the two-sided exact binomial
    when b + c < 25.
    """
    a = _binary(correct_a, "correct_a")
    b_ = _binary(correct_b, "correct_b")
    if a.shape != b_.shape:
        raise DataError("paired outcome vectors differ in length")
    b = int(np.sum((a == 1) & (b_ == 0)))
    c = int(np.sum((a == 0) & (b_ == 1)))
    n = len(a)
    estimate = (b - c) / n if n else 0.0
    if b + c == 0:
        return TestResult(0.0, 1.0, estimate, "mcnemar")
    num = (abs(b - c) - 1.0) ** 2 if continuity else float((b - c) ** 2)
    if continuity and abs(b - c) < 1:
        num = 0.0
    stat = num / (b + c)
    use_exact = (b + c < 25) if exact == "auto" else bool(exact)
    if use_exact:
        p = min(1.0, 2.0 * sps.binom.cdf(min(b, c), b + c, 0.5))
        return TestResult(stat, float(p), estimate, "mcnemar-exact")
    return TestResult(stat, float(sps.chi2.sf(stat, 1)), estimate, "mcnemar-chi2")


def gss_paired_proportions(outcome_a, outcome_b, include_a=None, include_b=None) -> TestResult:
    """Generalized score statistic for two correlated proportions.

    Each case contributes an observation for method A when ``include_a`` is set
    and for method B when ``include_b`` is set (both default to all cases).
    Observations are binary outcomes; the test is the score test of the method
    effect in a marginal logistic model, with the variance estimated
    robustly over cases (clusters). For recall both methods see the same
    positive cases and the statistic reduces to the uncorrected McNemar form;
    for predictive values the two observation sets differ per method.
    """
    ya = _binary(outcome_a, "outcome_a")
    yb = _binary(outcome_b, "outcome_b")
    n = len(ya)
    if len(yb) != n:
        raise DataError("paired outcome vectors differ in length")
    ia = np.ones(n, bool) if include_a is None else np.asarray(include_a, bool)
    ib = np.ones(n, bool) if include_b is None else np.asarray(include_b, bool)
    na, nb = int(ia.sum()), int(ib.sum())
    if na == 0 or nb == 0:
        raise DataError("comparison subset is empty for at least one method")
    pa = ya[ia].mean()
    pb = yb[ib].mean()
    estimate = float(pa - pb)
    p_hat = (ya[ia].sum() + yb[ib].sum()) / (na + nb)
    xbar = nb / (na + nb)
    # per-case efficient score contributions for the method-B indicator
    u = np.where(ia, (0.0 - xbar) * (ya - p_hat), 0.0) + np.where(ib, (1.0 - xbar) * (yb - p_hat), 0.0)
    U = u.sum()
    V = float(np.sum(u ** 2))
    if V == 0.0:
        degenerate = abs(U) > 1e-12
        return TestResult(0.0, 1.0, estimate, "gss", degenerate=degenerate)
    stat = float(U * U / V)
    return TestResult(stat, float(sps.chi2.sf(stat, 1)), estimate, "gss")


@dataclass
class DelongResult(TestResult):
    auc_a: float = math.nan
    auc_b: float = math.nan
    variance: float = math.nan


def delong_components(scores: np.ndarray, y: np.ndarray):
    """Structural components V10 (per positive) and V01 (per negative) of each score row."""
    pos = scores[:, y == 1]
    neg = scores[:, y == 0]
    m = pos.shape[1]
    n = neg.shape[1]
    k = scores.shape[0]
    v10 = np.empty((k, m))
    v01 = np.empty((k, n))
    aucs = np.empty(k)
    for r in range(k):
        tx = midrank(pos[r])
        ty = midrank(neg[r])
        tz = midrank(np.concatenate([pos[r], neg[r]]))
        aucs[r] = (tz[:m].sum() - m * (m + 1) / 2.0) / (m * n)
        v10[r] = (tz[:m] - tx) / n
        v01[r] = 1.0 - (tz[m:] - ty) / m
    return aucs, v10, v01


def delong(scores_a, scores_b, labels) -> DelongResult:
    """DeLong test for the difference of two correlated AUCs (two-sided z-test)."""
    sa, y = _check_binary(scores_a, labels)
    sb, _ = _check_binary(scores_b, labels)
    aucs, v10, v01 = delong_components(np.vstack([sa, sb]), y)
    m, n = v10.shape[1], v01.shape[1]
    s10 = np.atleast_2d(np.cov(v10))
    s01 = np.atleast_2d(np.cov(v01))
    contrast = np.array([1.0, -1.0])
    var = float(contrast @ s10 @ contrast / m + contrast @ s01 @ contrast / n)
    diff = float(aucs[0] - aucs[1])
    if var <= 1e-15:
        if abs(diff) < 1e-15:
            return DelongResult(0.0, 1.0, diff, "delong", False, aucs[0], aucs[1], max(var, 0.0))
        return DelongResult(math.inf, 0.0, diff, "delong", True, aucs[0], aucs[1], max(var, 0.0))
    z = diff / math.sqrt(var)
    p = float(2.0 * sps.norm.sf(abs(z)))
    return DelongResult(z, min(p, 1.0), diff, "delong", False, float(aucs[0]), float(aucs[1]), var)


def chi_square_independence(table) -> TestResult:
    """Pearson chi-square test of independence for an r x k contingency table (no Yates)."""
    obs = np.asarray(table, dtype=float)
    if obs.ndim != 2:
        raise DataError("contingency table must be 2-D")
    rows = obs.sum(axis=1)
    cols = obs.sum(axis=0)
    if (rows == 0).any() or (cols == 0).any():
        raise DataError("contingency table has a zero marginal")
    expected = np.outer(rows, cols) / obs.sum()
    stat = float(((obs - expected) ** 2 / expected).sum())
    dof = (obs.shape[0] - 1) * (obs.shape[1] - 1)
    return TestResult(stat, float(sps.chi2.sf(stat, dof)), float(dof), "chi2")


def mann_whitney(x, y, alternative: str = "two-sided", continuity: bool = True) -> TestResult:
    """Mann-Whitney U of ``x`` vs ``y`` with tie-corrected normal approximation.

    ``estimate`` is the common-language effect U / (n_x n_y).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n1, n2 = len(x), len(y)
    if n1 == 0 or n2 == 0:
        raise DataError("samples must be nonempty")
    r = midrank(np.concatenate([x, y]))
    u = float(r[:n1].sum() - n1 * (n1 + 1) / 2.0)
    mu = n1 * n2 / 2.0
    n = n1 + n2
    _, counts = np.unique(np.concatenate([x, y]), return_counts=True)
    tie = float(np.sum(counts ** 3 - counts))
    var = n1 * n2 / 12.0 * ((n + 1) - tie / (n * (n - 1))) if n > 1 else 0.0
    est = u / (n1 * n2)
    if var <= 0:
        return TestResult(u, 1.0, est, "mann-whitney", degenerate=True)
    cc = 0.5 if continuity else 0.0
    sd = math.sqrt(var)
    if alternative == "two-sided":
        z = (abs(u - mu) - cc) / sd
        p = 2.0 * sps.norm.sf(max(z, 0.0)) if z > 0 else 1.0
        p = min(1.0, p)
    elif alternative == "greater":
        p = sps.norm.sf((u - mu - cc) / sd)
    elif alternative == "less":
        p = sps.norm.cdf((u - mu + cc) / sd)
    else:
        raise ValueError(f"unknown alternative {alternative!r}")
    return TestResult(u, float(p), est, "mann-whitney")
