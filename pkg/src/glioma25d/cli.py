"""Command-line entry point: generate, preprocess, train, predict, evaluate, compare, ablate, survival, report."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .cohort import TASK_LABEL, generate_cohort, split_cohort
from .errors import ConfigError, DataError, Glioma25DError
from .infer import prediction_row, read_predictions, write_predictions
from .manifest import read_manifest, read_manifest_records, write_manifest
from .metrics import auroc, metric_report
from .preprocess import FeatureStats, PreparedCase
from .reports import (TABLE_FIELDS, ablation_rows, comparison_rows, confusion_rows, curve_rows, paired_tests,
                      plot_confusion, plot_curves, plot_km, metrics_table_text, write_csv, write_json)
from .slicing import PLANES
from .survival import compare_groups, try_subtype

log = logging.getLogger("glioma25d")

OUTPUT_ROOT_ENV = "GLIOMA25D_OUTPUT_ROOT"


# -- helpers


def _load_config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    over = {}
    for key in ("task", "fusion_mode", "view", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            over[key] = v
    if over:
        d = cfg.to_dict()
        d.update(over)
        cfg = ex.ExperimentConfig.from_dict(d)
    return cfg


def _run_dir(args, cfg: ex.ExperimentConfig) -> Path:
    if getattr(args, "run", None):
        return Path(args.run)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, cfg.output_dir))
    return root / f"{cfg.task}_{cfg.fusion_mode}_{cfg.view}_s{cfg.seed}".replace("+", "-")


def _snapshot(run: Path, cfg: ex.ExperimentConfig) -> None:
    run.mkdir(parents=True, exist_ok=True)
    cfg.save(run / "config.json")
    (run / "config_hash.txt").write_text(cfg.digest() + "\n")


def _splits(cohort: Path) -> dict[str, str]:
    p = cohort / "splits.json"
    if not p.exists():
        raise DataError(f"split file not found: {p}")
    d = json.loads(p.read_text())
    return {cid: split for split, ids in d.items() for cid in ids}


def _prepared_dir(cohort: Path, cfg: ex.ExperimentConfig) -> Path:
    return cohort / f"prepared_{cfg.task}_{'x'.join(map(str, cfg.network_shape))}"


def _save_prepared(c: PreparedCase, path: Path) -> None:
    np.savez_compressed(path, channels=c.channels, mask=c.mask, age=np.float64(c.age_years),
                        loc=np.asarray(c.loc_probs), label=np.str_(c.label), case_id=np.str_(c.case_id))


def _load_prepared(path: Path) -> PreparedCase:
    with np.load(path) as z:
        return PreparedCase(str(z["case_id"]), str(z["label"]), z["channels"], z["mask"],
                            float(z["age"]), tuple(float(v) for v in z["loc"]))


def _ensure_prepared(cohort: Path, cfg: ex.ExperimentConfig) -> Path:
    out = _prepared_dir(cohort, cfg)
    if (out / "feature_stats.json").exists():
        return out
    out.mkdir(parents=True, exist_ok=True)
    splits = _splits(cohort)
    train = []
    for case in read_manifest(cohort / "manifest.json"):
        if case.label(cfg.task) == "unknown":
            continue
        prep = ex.prepare_case(case, cfg.task, cfg.network_shape)
        _save_prepared(prep, out / f"{prep.case_id}.npz")
        if splits.get(prep.case_id) == "train":
            train.append(prep)
    ex.fit_feature_stats(train).save(out / "feature_stats.json")
    return out


def _cases_for(prepared: Path, cohort: Path, split: str) -> list[PreparedCase]:
    splits = _splits(cohort)
    ids = sorted(cid for cid, s in splits.items() if s == split)
    cases = [_load_prepared(prepared / f"{cid}.npz") for cid in ids if (prepared / f"{cid}.npz").exists()]
    if not cases:
        raise DataError(f"split {split!r} has no usable cases in {cohort}")
    return cases


def _planes_for(view: str) -> tuple[str, ...]:
    return PLANES if view == "2.5D" else (view,)


def _plane_seed(seed: int, plane: str) -> int:
    return seed * 10 + PLANES.index(plane)


def _train_planes(cfg, cohort: Path, run: Path, planes) -> None:
    prepared = _ensure_prepared(cohort, cfg)
    stats = FeatureStats.load(prepared / "feature_stats.json")
    train = _cases_for(prepared, cohort, "train")
    (run / "checkpoints").mkdir(parents=True, exist_ok=True)
    stats.save(run / "feature_stats.json")
    for plane in planes:
        ckpt = run / "checkpoints" / f"{plane}.pt"
        if ckpt.exists():
            continue
        res = ex.train_plane(train, plane, cfg.task, cfg.model_config(), cfg.schedule_obj(), stats,
                             _plane_seed(cfg.seed, plane))
        res.write_history(run / f"history_{plane}.csv")
        ex.save_checkpoint(ckpt, res.model, stats, cfg.task, plane)


def _predict(cfg, cohort: Path, run: Path, split: str, planes) -> list[dict]:
    models = {}
    stats = None
    for plane in planes:
        ckpt = run / "checkpoints" / f"{plane}.pt"
        if not ckpt.exists():
            raise ConfigError(f"missing checkpoint for plane {plane}: {ckpt}")
        models[plane], stats, _ = ex.load_checkpoint(ckpt)
    prepared = _ensure_prepared(cohort, cfg)
    cases = _cases_for(prepared, cohort, split)
    planar = ex.predict_planes(models, cases, stats)
    return planar, cases


# -- commands


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    cases = generate_cohort(cfg.phantom_spec(), cfg.class_fractions, cfg.n_cases, cfg.seed, task=cfg.task)
    split = split_cohort(cases, cfg.splits, stratify_on=TASK_LABEL[cfg.task], seed=cfg.seed)
    write_manifest(cases, out / "manifest.json")
    write_json(split.to_dict(), out / "splits.json")
    cfg.save(out / "config.json")
    print(f"wrote {len(cases)} cases to {out}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = _load_config(args)
    out = _ensure_prepared(Path(args.cohort), cfg)
    print(f"prepared cases in {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    run = _run_dir(args, cfg)
    _snapshot(run, cfg)
    _train_planes(cfg, Path(args.cohort), run, _planes_for(cfg.view))
    print(f"trained {cfg.view} model(s) in {run}")
    return 0


def cmd_predict(args) -> int:
    run = Path(args.run)
    cfg = ex.ExperimentConfig.load(run / "config.json")
    planar, cases = _predict(cfg, Path(args.cohort), run, args.split, _planes_for(cfg.view))
    rows = [prediction_row(c.case_id, cfg.task, c.label, ex.combine(planar[c.case_id], cfg.view, cfg.bg_score))
            for c in cases]
    out = Path(args.out) if args.out else run / f"predictions_{args.split}.csv"
    write_predictions(rows, out)
    print(f"wrote {out}")
    return 0


def _pred_arrays(path):
    rows = read_predictions(path)
    if not rows:
        raise DataError(f"no predictions in {path}")
    return ([r["case_id"] for r in rows], [r["final"] for r in rows], [r["label"] for r in rows],
            np.array([r["score"] for r in rows]))


def cmd_evaluate(args) -> int:
    ids, finals, labels, scores = _pred_arrays(args.predictions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pct = (2.5, 97.5) if args.ci95 else (5.0, 95.0)
    rep = metric_report(finals, labels, scores, positive_class=args.positive,
                        n_resamples=args.resamples, seed=args.seed, percentiles=pct)
    d = rep.to_dict()
    d.update({"positive_class": args.positive, "seed": args.seed, "n_resamples": args.resamples,
              "percentiles": list(pct)})
    write_json(d, out / "metrics.json")
    write_csv(confusion_rows(finals, labels), out / "confusion.csv", ("true", "class0", "class1", "BG"))
    y = np.array([1 if l == args.positive else 0 for l in labels])
    s = scores if args.positive == "class1" else 1 - scores
    write_csv(curve_rows(s, y), out / "curves.csv", ("curve", "x", "y", "threshold"))
    (out / "metrics_table.txt").write_text(metrics_table_text({args.split: rep}))
    if not args.no_plots:
        plot_curves(s, y, out)
        plot_confusion(finals, labels, out / "confusion.png")
    print(metrics_table_text({args.split: rep}), end="")
    return 0


def cmd_compare(args) -> int:
    ids_a, fa, la, sa = _pred_arrays(args.a)
    ids_b, fb, lb, sb = _pred_arrays(args.b)
    if ids_a != ids_b or la != lb:
        raise DataError("prediction files do not cover the same cases in the same order")
    kw = dict(positive_class=args.positive, n_resamples=args.resamples, seed=args.seed)
    rep_a, rep_b = metric_report(fa, la, sa, **kw), metric_report(fb, lb, sb, **kw)
    tests = paired_tests(fa, fb, la, sa, sb, args.positive)
    rows = comparison_rows(args.name_a, args.name_b, args.split, rep_a, rep_b, tests)
    write_csv(rows, args.out, TABLE_FIELDS)
    print(f"wrote {args.out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    cohort = Path(args.cohort)
    root = Path(args.out) if args.out else Path(os.environ.get(OUTPUT_ROOT_ENV, cfg.output_dir)) / "ablation"
    schemes = args.schemes.split(",")
    views = args.views.split(",")
    planes = sorted({p for v in views for p in _planes_for(v)}, key=PLANES.index)
    results = {}
    labels = None
    for scheme in schemes:
        d = cfg.to_dict()
        d.update({"fusion_mode": scheme, "view": "2.5D"})
        scfg = ex.ExperimentConfig.from_dict(d)
        run = root / f"{scfg.task}_{scheme}_s{scfg.seed}".replace("+", "-")
        _snapshot(run, scfg)
        _train_planes(scfg, cohort, run, planes)
        planar, cases = _predict(scfg, cohort, run, args.split, planes)
        labels = [c.label for c in cases]
        for view in views:
            preds = [ex.combine(planar[c.case_id], view, cfg.bg_score) for c in cases]
            write_predictions([prediction_row(c.case_id, cfg.task, c.label, p) for c, p in zip(cases, preds)],
                              run / f"predictions_{args.split}_{view}.csv")
            results[f"{scheme}/{view}"] = ([p.label for p in preds], labels, np.array([p.score for p in preds]))
    reference = args.reference
    if reference is None:
        # best AUROC across all rows
        y = np.array([1 if l == args.positive else 0 for l in labels])
        flip = args.positive == "class0"
        reference = max(results, key=lambda k: auroc(1 - results[k][2] if flip else results[k][2], y))
    if reference not in results:
        raise ConfigError(f"reference {reference!r} is not among the ablation rows")
    rows = ablation_rows(results, reference, args.split, args.positive, args.resamples, cfg.seed,
                         tuple(cfg.ci_percentiles))
    root.mkdir(parents=True, exist_ok=True)
    out = root / f"ablation_{args.split}.csv"
    write_csv(rows, out, TABLE_FIELDS)
    print(f"wrote {out} (reference {reference})")
    return 0


def cmd_survival(args) -> int:
    records = {r["case_id"]: r for r in read_manifest_records(Path(args.cohort) / "manifest.json")}
    rows = read_predictions(args.predictions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    times, events, groups = [], [], []

    def add(rec, group):
        if rec.get("os_months") is None:
            return
        times.append(float(rec["os_months"]))
        events.append(rec["event"] == "death-observed")
        groups.append(group)

    for r in rows:
        rec = records.get(r["case_id"])
        if rec is None:
            raise DataError(f"case {r['case_id']} not found in the cohort manifest")
        add(rec, f"true:{r['label']}")
        add(rec, f"pred:{r['final']}")
        if r["final"] != r["label"] and r["final"] != "BG":
            add(rec, f"misclassified:pred-{r['final']}")
        subtype = try_subtype(rec["idh"], rec["codel"], rec["grade"])
        if subtype:
            add(rec, f"who:{subtype}")
    pairs = [(f"true:class0", f"true:class1"), ("pred:class0", "pred:class1"),
             ("true:class0", "pred:class0"), ("true:class1", "pred:class1"),
             ("misclassified:pred-class0", "misclassified:pred-class1")]
    present = set(groups)
    pairs = [p for p in pairs if p[0] in present and p[1] in present]
    cmp = compare_groups(times, events, groups, pairs=pairs)
    km_rows = []
    for g, c in cmp.curves.items():
        km_rows.append({"group": g, "time": 0.0, "survival": 1.0, "at_risk": "", "events": 0})
        for t, s, n, d in zip(c.times, c.survival, c.at_risk, c.events):
            km_rows.append({"group": g, "time": float(t), "survival": float(s), "at_risk": n, "events": d})
    write_csv(km_rows, out / "km.csv", ("group", "time", "survival", "at_risk", "events"))
    cox_rows = [{"reference": a, "group": b, "hazard_ratio": f.hazard_ratio, "hr_lo": f.hr_ci[0],
                 "hr_hi": f.hr_ci[1], "wald_p": f.wald_p, "score_p": f.score_p,
                 "converged": int(f.converged), "flags": ";".join(f.flags)}
                for (a, b), f in cmp.cox.items()]
    write_csv(cox_rows, out / "cox.csv", ("reference", "group", "hazard_ratio", "hr_lo", "hr_hi", "wald_p",
                                          "score_p", "converged", "flags"))
    medians = {g: c.median for g, c in cmp.curves.items()}
    write_json({"medians": medians, "flags": cmp.flags}, out / "survival.json")
    if not args.no_plots:
        plot_km(cmp.curves, out / "km.png")
    for g, m in sorted(medians.items()):
        print(f"{g:<40} median OS {'undefined' if m is None else f'{m:.2f}'}")
    return 0


def cmd_report(args) -> int:
    from .metrics import MetricReport

    reports = {}
    for path in args.metrics:
        d = json.loads(Path(path).read_text())
        keep = {k: d[k] for k in MetricReport.__dataclass_fields__ if k in d}
        keep["auroc_ci"] = tuple(keep["auroc_ci"])
        keep["auprc_ci"] = tuple(keep["auprc_ci"])
        reports[Path(path).parent.name] = MetricReport(**keep)
    text = metrics_table_text(reports)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


# -- parser


def _common(p, config=True):
    if config:
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--task", choices=("IDH", "1p19q"))
        p.add_argument("--fusion-mode", dest="fusion_mode", choices=ex.FUSION_MODES)
        p.add_argument("--view", choices=ex.VIEWS)
        p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="glioma25d", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic cohort")
    _common(p)
    p.add_argument("--out", required=True, help="cohort directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("preprocess", help="normalise/resample cases and fit feature statistics")
    _common(p)
    p.add_argument("--cohort", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the planar model(s) for the configured view")
    _common(p)
    p.add_argument("--cohort", required=True)
    p.add_argument("--run", help="run directory (default derived from config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict a split with a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--split", default="internal")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    for name, func, hlp in (("evaluate", cmd_evaluate, "metrics, curves and confusion matrix"),
                            ("compare", cmd_compare, "paired tests between two prediction files")):
        p = sub.add_parser(name, help=hlp)
        if name == "evaluate":
            p.add_argument("--predictions", required=True)
            p.add_argument("--out", required=True)
            p.add_argument("--ci95", action="store_true", help="2.5/97.5 percentiles instead of 5/95")
            p.add_argument("--no-plots", action="store_true")
        else:
            p.add_argument("--a", required=True)
            p.add_argument("--b", required=True)
            p.add_argument("--name-a", default="A")
            p.add_argument("--name-b", default="B")
            p.add_argument("--out", required=True)
        p.add_argument("--split", default="internal")
        p.add_argument("--positive", default="class1", choices=("class0", "class1"))
        p.add_argument("--resamples", type=int, default=1000)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="fusion-scheme x view ablation grid")
    _common(p)
    p.add_argument("--cohort", required=True)
    p.add_argument("--schemes", default="none,age,loc,age+loc")
    p.add_argument("--views", default="axial,coronal,sagittal,2.5D")
    p.add_argument("--split", default="internal")
    p.add_argument("--reference", help="row used for differences, e.g. 'age+loc/2.5D' (default: best AUROC)")
    p.add_argument("--positive", default="class1", choices=("class0", "class1"))
    p.add_argument("--resamples", type=int, default=1000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("survival", help="KM curves and Cox fits for true/predicted groups")
    p.add_argument("--predictions", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_survival)

    p = sub.add_parser("report", help="per-split metric table from metrics.json files")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Glioma25DError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
