"""Kaplan-Meier curves, two-group Cox regression and WHO 2016 subtype mapping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import stats as sps

from .errors import DataError

log = logging.getLogger(__name__)


@dataclass
class SurvivalCurve:
    """Right-continuous step function: S(t) = survival[i] for times[i] <= t < times[i+1].

    ``times`` lists the distinct observed event times; before the first event S = 1.
    """

    times: list
    survival: list
    at_risk: list[int]
    events: list[int]
    median: float | None
    censor_times: list = field(default_factory=list)

    def at(self, t):
        s = 1
        for ti, si in zip(self.times, self.survival):
            if ti <= t:
                s = si
            else:
                break
        return s


def kaplan_meier(times: Sequence, events: Sequence, exact: bool = False) -> SurvivalCurve:
    """Product-limit estimator.

    ``events`` is truthy for an observed death, falsy for censoring. With
    ``exact=True`` the survival values are :class:`fractions.Fraction`.
    """
    t = list(times)
    e = [bool(x) for x in events]
    if not t:
        raise DataError("kaplan_meier needs at least one observation")
    if len(t) != len(e):
        raise DataError("times and events differ in length")
    if any(x < 0 for x in t):
        raise DataError("survival times must be nonnegative")
    one = Fraction(1) if exact else 1.0
    s = one
    out_t, out_s, out_n, out_d = [], [], [], []
    n_at_risk = len(t)
    for ut in sorted(set(t)):
        d = sum(1 for ti, ei in zip(t, e) if ti == ut and ei)
        c = sum(1 for ti, ei in zip(t, e) if ti == ut and not ei)
        if d:
            s = s * (one - (Fraction(d, n_at_risk) if exact else d / n_at_risk))
            out_t.append(ut)
            out_s.append(s)
            out_n.append(n_at_risk)
            out_d.append(d)
        n_at_risk -= d + c
    median = None
    for ti, si in zip(out_t, out_s):
        if si <= 0.5:
            median = ti
            break
    censored = sorted(ti for ti, ei in zip(t, e) if not ei)
    return SurvivalCurve(out_t, out_s, out_n, out_d, median, censored)


@dataclass
class CoxFit:
    beta: float
    se: float
    hazard_ratio: float
    hr_ci: tuple[float, float]
    wald_p: float
    score_stat: float
    score_p: float
    converged: bool
    n_iter: int
    flags: list[str] = field(default_factory=list)


def _partial_loglik(beta, t, e, x, ties):
    """Log partial likelihood, score and information for one binary covariate."""
    ll = 0.0
    u = 0.0
    info = 0.0
    w = np.exp(beta * x)
    for ut in np.unique(t[e == 1]):
        risk = t >= ut
        dead = (t == ut) & (e == 1)
        d = int(dead.sum())
        s0 = w[risk].sum()
        s1 = (w * x)[risk].sum()
        s2 = (w * x * x)[risk].sum()
        xd = x[dead].sum()
        if ties == "breslow" or d == 1:
            ll += beta * xd - d * math.log(s0)
            u += xd - d * s1 / s0
            info += d * (s2 / s0 - (s1 / s0) ** 2)
        else:
            d0 = w[dead].sum()
            d1 = (w * x)[dead].sum()
            d2 = (w * x * x)[dead].sum()
            ll += beta * xd
            for k in range(d):
                f = k / d
                a0 = s0 - f * d0
                a1 = s1 - f * d1
                a2 = s2 - f * d2
                ll -= math.log(a0)
                u -= a1 / a0
                info += a2 / a0 - (a1 / a0) ** 2
    return ll, u, info


def _exp(x: float) -> float:
    return math.exp(x) if x < 700 else math.inf


def cox_binary(times, events, group, ties: str = "breslow", max_iter: int = 50,
               tol: float = 1e-10) -> CoxFit:
    """Cox proportional-hazards fit with a single 0/1 covariate (Newton-Raphson).

    Reports Wald inference on beta and the score test at beta = 0, which on
    untied data equals the log-rank chi-square. Monotone likelihood (one group
    never at risk when the other dies, or vice versa) is flagged as
    non-convergence; beta then carries the divergence direction.
    """
    if ties not in ("breslow", "efron"):
        raise ValueError(f"unknown tie method {ties!r}")
    t = np.asarray(times, dtype=float)
    e = np.asarray(events).astype(int)
    x = np.asarray(group).astype(float)
    if not (len(t) == len(e) == len(x)):
        raise DataError("times, events and group differ in length")
    flags = []
    groups = set(np.unique(x).tolist())
    if not groups <= {0.0, 1.0}:
        raise DataError("group must be binary 0/1")
    if groups != {0.0, 1.0}:
        flags.append("single-group")
    if e.sum() == 0:
        flags.append("no-events")
    if flags:
        log.warning("cox_binary degenerate input: %s", ", ".join(flags))
        return CoxFit(0.0, math.inf, 1.0, (0.0, math.inf), 1.0, 0.0, 1.0, False, 0, flags)

    _, u0, i0 = _partial_loglik(0.0, t, e, x, ties)
    score_stat = u0 * u0 / i0 if i0 > 0 else 0.0
    score_p = float(sps.chi2.sf(score_stat, 1)) if i0 > 0 else 1.0

    beta = 0.0
    ll, u, info = _partial_loglik(beta, t, e, x, ties)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if info <= 1e-12:
            break
        step = u / info
        # step halving keeps the partial likelihood nondecreasing
        new = beta + step
        new_ll, new_u, new_info = _partial_loglik(new, t, e, x, ties)
        halvings = 0
        while new_ll < ll - 1e-12 and halvings < 30:
            step /= 2
            new = beta + step
            new_ll, new_u, new_info = _partial_loglik(new, t, e, x, ties)
            halvings += 1
        beta, ll, u, info = new, new_ll, new_u, new_info
        if abs(step) < tol:
            converged = True
            break
        if abs(beta) > 30:
            break
    if abs(beta) > 15 or info <= 1e-8:
        converged = False
        flags.append("monotone-likelihood")
    if not converged:
        log.warning("cox_binary did not converge (beta=%.3g)", beta)
    se = 1.0 / math.sqrt(info) if info > 1e-300 else math.inf
    if math.isfinite(se):
        z = beta / se
        wald_p = float(2 * sps.norm.sf(abs(z)))
        lo, hi = _exp(beta - 1.959963984540054 * se), _exp(beta + 1.959963984540054 * se)
    else:
        wald_p, lo, hi = math.nan, 0.0, math.inf
    return CoxFit(beta, se, _exp(beta), (lo, hi), wald_p, score_stat, score_p,
                  converged, it, flags)


def logrank(times, events, group) -> tuple[float, float]:
    """Two-group log-rank chi-square and p-value (hypergeometric variance)."""
    t = np.asarray(times, dtype=float)
    e = np.asarray(events).astype(int)
    g = np.asarray(group).astype(int)
    o_minus_e = 0.0
    var = 0.0
    for ut in np.unique(t[e == 1]):
        risk = t >= ut
        n = risk.sum()
        n1 = (risk & (g == 1)).sum()
        dead = (t == ut) & (e == 1)
        d = dead.sum()
        d1 = (dead & (g == 1)).sum()
        o_minus_e += d1 - d * n1 / n
        if n > 1:
            var += d * (n1 / n) * (1 - n1 / n) * (n - d) / (n - 1)
    stat = o_minus_e ** 2 / var if var > 0 else 0.0
    return float(stat), float(sps.chi2.sf(stat, 1))


OLIGO = "oligodendroglioma"
ASTRO_MUT = "IDH-mut astrocytoma"
ASTRO_WT = "IDH-wt astrocytoma"
GBM_MUT = "IDH-mut glioblastoma"
GBM_WT = "IDH-wt glioblastoma"
SUBTYPES = (OLIGO, ASTRO_MUT, ASTRO_WT, GBM_MUT, GBM_WT)


class UnclassifiableError(DataError):
    pass


def who2016_subtype(idh: str, codel: str, grade: str) -> str:
    if grade == "IV":
        if idh == "mut":
            return GBM_MUT
        if idh == "wt":
            return GBM_WT
    elif grade in ("II", "III"):
        if idh == "mut" and codel == "codeleted":
            return OLIGO
        if idh == "mut" and codel == "non-codeleted":
            return ASTRO_MUT
        if idh == "wt" and codel == "non-codeleted":
            return ASTRO_WT
    raise UnclassifiableError(f"cannot assign WHO 2016 subtype to idh={idh}, codel={codel}, grade={grade}")


def try_subtype(idh: str, codel: str, grade: str) -> str | None:
    try:
        return who2016_subtype(idh, codel, grade)
    except UnclassifiableError:
        return None


@dataclass
class GroupComparison:
    curves: dict[str, SurvivalCurve]
    cox: dict[tuple[str, str], CoxFit]
    flags: dict[str, list[str]]


def compare_groups(times, events, groups: Sequence[str | None],
                   pairs: Sequence[tuple[str, str]] | None = None,
                   ties: str = "breslow") -> GroupComparison:
    """KM curve per group plus Cox fits for each requested (reference, other) pair.

    ``groups`` holds one label per observation (None = excluded). The same
    case may be listed twice under different labels by concatenating inputs,
    which is how ground-truth and predicted subtype groups are compared.
    Without ``pairs`` every unordered pair of groups is fitted.
    """
    t = np.asarray(times, dtype=float)
    e = np.asarray(events).astype(int)
    labels = list(groups)
    names = sorted({g for g in labels if g is not None})
    if not names:
        raise DataError("no nonempty groups")
    curves = {}
    flags: dict[str, list[str]] = {}
    for g in names:
        sel = np.array([lab == g for lab in labels])
        curves[g] = kaplan_meier(t[sel].tolist(), e[sel].tolist())
        f = []
        if e[sel].sum() == 0:
            f.append("no-events")
        if sel.sum() == 1:
            f.append("single-case")
        if f:
            flags[g] = f
    if pairs is None:
        pairs = [(a, b) for i, a in enumerate(names) for b in names[i + 1:]]
    cox = {}
    for a, b in pairs:
        sa = np.array([lab == a for lab in labels])
        sb = np.array([lab == b for lab in labels])
        tt = np.r_[t[sa], t[sb]]
        ee = np.r_[e[sa], e[sb]]
        xx = np.r_[np.zeros(sa.sum()), np.ones(sb.sum())]
        fit = cox_binary(tt, ee, xx, ties=ties)
        if flags.get(a) or flags.get(b):
            fit.flags = sorted(set(fit.flags) | {"small-or-eventless-group"})
        cox[(a, b)] = fit
    return GroupComparison(curves, cox, flags)
