"""Comparison and ablation tables, per-split metric text and plot files."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .metrics import BG, MetricReport, confusion_with_bg, metric_report, pr_auc, roc_auc
from .stats import delong, gss_paired_proportions, mcnemar

METRICS = ("accuracy", "precision", "recall", "f1", "auroc", "auprc")
TABLE_FIELDS = ("row", "split", "metric", "value", "difference", "p_value", "test")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.6f}"
    return str(x)


def write_csv(rows: Sequence[Mapping], path, fields: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in fields})


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def paired_tests(finals_a, finals_b, labels, scores_a, scores_b, positive="class1") -> dict[str, dict]:
    """Accuracy/precision by McNemar, recall by the generalised score statistic, AUROC by DeLong.

    Precision is tested on cases that at least one method called positive;
    recall on the true-positive-class cases.
    """
    fa, fb, y = np.asarray(finals_a), np.asarray(finals_b), np.asarray(labels)
    ca, cb = fa == y, fb == y
    out = {"accuracy": mcnemar(ca, cb)}
    called = (fa == positive) | (fb == positive)
    if called.any():
        out["precision"] = mcnemar(ca[called], cb[called])
    truth = y == positive
    if truth.any():
        out["recall"] = gss_paired_proportions(fa[truth] == positive, fb[truth] == positive)
    yb = truth.astype(int)
    sa, sb = np.asarray(scores_a, float), np.asarray(scores_b, float)
    if positive == "class0":
        sa, sb = 1 - sa, 1 - sb
    if 0 < yb.sum() < len(yb):
        out["auroc"] = delong(sa, sb, yb)
    return {k: {"statistic": v.statistic, "p_value": v.p_value,
                "test": v.method + ("-degenerate" if v.degenerate else "")} for k, v in out.items()}


def comparison_rows(name_a: str, name_b: str, split: str, rep_a: MetricReport, rep_b: MetricReport,
                    tests: Mapping[str, dict]) -> list[dict]:
    """Rows (metric, value A, difference A-B, p-value) shaped like the paired comparison tables."""
    rows = []
    for m in METRICS:
        a, b = getattr(rep_a, m), getattr(rep_b, m)
        t = tests.get(m, {})
        rows.append({"row": f"{name_a} vs {name_b}", "split": split, "metric": m, "value": a,
                     "difference": a - b, "p_value": t.get("p_value"), "test": t.get("test", "")})
    return rows


def ablation_rows(results: Mapping[str, tuple], reference: str, split: str, positive="class1",
                  n_resamples: int = 1000, seed: int = 0, percentiles=(5.0, 95.0)) -> list[dict]:
    """One block of rows per scheme/plane: metric value, difference vs ``reference``, p-value.

    ``results[name] = (finals, labels, scores)`` on the same cases in the same order.
    """
    ref = results[reference]
    ref_rep = metric_report(*ref, positive_class=positive, n_resamples=n_resamples, seed=seed,
                            percentiles=percentiles)
    rows = []
    for name, (finals, labels, scores) in results.items():
        rep = metric_report(finals, labels, scores, positive_class=positive, n_resamples=n_resamples,
                            seed=seed, percentiles=percentiles)
        tests = {} if name == reference else paired_tests(finals, ref[0], labels, scores, ref[2], positive)
        for m in METRICS:
            v = getattr(rep, m)
            t = tests.get(m, {})
            rows.append({"row": name, "split": split, "metric": m, "value": v,
                         "difference": None if name == reference else v - getattr(ref_rep, m),
                         "p_value": t.get("p_value"), "test": t.get("test", "")})
    return rows


def metrics_table_text(reports: Mapping[str, MetricReport]) -> str:
    """Human-readable table: one line per split."""
    head = f"{'split':<14}{'acc':>7}{'prec':>7}{'rec':>7}{'F1':>7}{'AUROC':>20}{'AUPRC':>20}"
    lines = [head, "-" * len(head)]
    for split, r in reports.items():
        ci = lambda p, c: f"{p:.3f} ({c[0]:.3f}-{c[1]:.3f})"
        lines.append(f"{split:<14}{r.accuracy:>7.3f}{r.precision:>7.3f}{r.recall:>7.3f}{r.f1:>7.3f}"
                     f"{ci(r.auroc, r.auroc_ci):>20}{ci(r.auprc, r.auprc_ci):>20}")
    return "\n".join(lines) + "\n"


def confusion_rows(finals, labels) -> list[dict]:
    cm = confusion_with_bg(finals, labels)
    return [{"true": t, "class0": int(cm[i, 0]), "class1": int(cm[i, 1]), BG: int(cm[i, 2])}
            for i, t in enumerate(("class0", "class1"))]


def curve_rows(scores, y) -> list[dict]:
    roc = roc_auc(scores, y)
    pr = pr_auc(scores, y)
    rows = [{"curve": "roc", "x": float(a), "y": float(b), "threshold": float(t)}
            for a, b, t in zip(roc.x, roc.y, roc.thresholds)]
    rows += [{"curve": "pr", "x": float(a), "y": float(b), "threshold": float(t)}
             for a, b, t in zip(pr.x, pr.y, pr.thresholds)]
    return rows


# -- plots


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path) -> None:
    # fixed metadata keeps the files byte-stable across runs
    fig.savefig(path, metadata={"Software": None}, dpi=100)


def plot_curves(scores, y, out_dir, prefix="") -> None:
    plt = _pyplot()
    roc, pr = roc_auc(scores, y), pr_auc(scores, y)
    for name, c, xl, yl in (("roc", roc, "1 - specificity", "sensitivity"),
                            ("pr", pr, "recall", "precision")):
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.step(c.x, c.y, where="post")
        ax.set_xlabel(xl)
        ax.set_ylabel(yl)
        ax.set_title(f"{name.upper()} (area {c.area:.3f})")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        _save(fig, Path(out_dir) / f"{prefix}{name}.png")
        plt.close(fig)


def plot_confusion(finals, labels, path) -> None:
    plt = _pyplot()
    cm = confusion_with_bg(finals, labels)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.imshow(cm, cmap="Blues")
    for (i, j), v in np.ndenumerate(cm):
        ax.text(j, i, str(v), ha="center", va="center")
    ax.set_xticks(range(3), ["class0", "class1", BG])
    ax.set_yticks(range(2), ["class0", "class1"])
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    _save(fig, path)
    plt.close(fig)


def plot_km(curves: Mapping, path) -> None:
    """Step curves per group with censor ticks."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, c in curves.items():
        t = [0.0] + [float(x) for x in c.times]
        s = [1.0] + [float(x) for x in c.survival]
        line = ax.step(t, s, where="post", label=name)[0]
        if c.censor_times:
            ax.plot(c.censor_times, [float(c.at(x)) for x in c.censor_times], "|",
                    color=line.get_color(), markersize=8)
    ax.set_xlabel("months")
    ax.set_ylabel("overall survival")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7)
    _save(fig, path)
    plt.close(fig)
