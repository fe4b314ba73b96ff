import csv
import json

import pytest
from conftest import CLI_CONFIG as CONFIG

from glioma25d.cli import main
from glioma25d.reports import TABLE_FIELDS

def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_directory_contents(cli_workspace):
    run = cli_workspace / "run"
    for name in ("config.json", "config_hash.txt", "feature_stats.json", "history_axial.csv",
                 "checkpoints/axial.pt", "predictions_internal.csv"):
        assert (run / name).exists(), name
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["seed"] == 0 and cfg["fusion_mode"] == "age"
    splits = json.loads((cli_workspace / "cohort" / "splits.json").read_text())
    assert len(_rows(run / "predictions_internal.csv")) == len(splits["internal"])


def test_evaluate_byte_identical(cli_workspace):
    pred = cli_workspace / "run" / "predictions_internal.csv"
    for out in ("ev1", "ev2"):
        assert main(["evaluate", "--predictions", str(pred), "--out", str(cli_workspace / out)]) == 0
    files = sorted(p.name for p in (cli_workspace / "ev1").iterdir())
    assert {"metrics.json", "confusion.csv", "curves.csv", "roc.png", "pr.png", "confusion.png"} <= set(files)
    for name in files:
        assert (cli_workspace / "ev1" / name).read_bytes() == (cli_workspace / "ev2" / name).read_bytes(), name
    conf = _rows(cli_workspace / "ev1" / "confusion.csv")
    assert list(conf[0]) == ["true", "class0", "class1", "BG"]
    m = json.loads((cli_workspace / "ev1" / "metrics.json").read_text())
    assert m["auroc_ci"][0] <= m["auroc"] <= m["auroc_ci"][1]


def test_ablate_and_compare_tables(cli_workspace):
    args = ["ablate", "--config", str(cli_workspace / "cfg.json"), "--cohort", str(cli_workspace / "cohort"),
            "--schemes", "none,age", "--views", "axial,2.5D", "--out", str(cli_workspace / "abl"),
            "--resamples", "100"]
    assert main(args) == 0
    rows = _rows(cli_workspace / "abl" / "ablation_internal.csv")
    assert list(rows[0]) == list(TABLE_FIELDS)
    assert {r["row"] for r in rows} == {"none/axial", "none/2.5D", "age/axial", "age/2.5D"}
    assert len(rows) == 4 * 6
    refs = {r["row"] for r in rows if r["difference"] == ""}
    assert len(refs) == 1
    # the axial cells of the grid equal a standalone axial run with the same seed
    age_axial = _rows(cli_workspace / "abl" / "IDH_age_s0" / "predictions_internal_axial.csv")
    single = _rows(cli_workspace / "run" / "predictions_internal.csv")
    assert [r["score"] for r in age_axial] == [r["score"] for r in single]

    a = cli_workspace / "abl" / "IDH_none_s0" / "predictions_internal_2.5D.csv"
    b = cli_workspace / "abl" / "IDH_age_s0" / "predictions_internal_2.5D.csv"
    out = cli_workspace / "cmp.csv"
    assert main(["compare", "--a", str(a), "--b", str(b), "--out", str(out), "--resamples", "100"]) == 0
    cmp = _rows(out)
    assert list(cmp[0]) == list(TABLE_FIELDS)
    assert [r["metric"] for r in cmp] == ["accuracy", "precision", "recall", "f1", "auroc", "auprc"]


def test_survival_and_report(cli_workspace, capsys):
    pred = cli_workspace / "run" / "predictions_internal.csv"
    assert main(["survival", "--predictions", str(pred), "--cohort", str(cli_workspace / "cohort"),
                 "--out", str(cli_workspace / "surv"), "--no-plots"]) == 0
    assert (cli_workspace / "surv" / "km.csv").exists()
    assert _rows(cli_workspace / "surv" / "cox.csv")
    main(["evaluate", "--predictions", str(pred), "--out", str(cli_workspace / "ev3"), "--no-plots"])
    assert main(["report", str(cli_workspace / "ev3" / "metrics.json")]) == 0
    assert "AUROC" in capsys.readouterr().out


def test_exit_codes(cli_workspace, tmp_path):
    assert main(["predict", "--run", str(tmp_path / "missing"), "--cohort", str(cli_workspace / "cohort")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"task": "IDH",\n "seed": -1}')
    assert main(["train", "--config", str(bad), "--cohort", str(cli_workspace / "cohort")]) == 2
    bad.write_text('{"task": "IDH",\n "seed": }')
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "c")]) == 2
    assert main(["preprocess", "--config", str(cli_workspace / "cfg.json"), "--cohort", str(tmp_path)]) == 3
    # a 2.5D run without the coronal/sagittal checkpoints cannot predict
    run = cli_workspace / "run"
    cfg = json.loads((run / "config.json").read_text())
    cfg["view"] = "2.5D"
    broken = tmp_path / "run"
    (broken / "checkpoints").mkdir(parents=True)
    (broken / "config.json").write_text(json.dumps(cfg))
    (broken / "checkpoints" / "axial.pt").write_bytes((run / "checkpoints" / "axial.pt").read_bytes())
    assert main(["predict", "--run", str(broken), "--cohort", str(cli_workspace / "cohort")]) == 2


def test_output_root_env(cli_workspace, monkeypatch, tmp_path):
    monkeypatch.setenv("GLIOMA25D_OUTPUT_ROOT", str(tmp_path / "root"))
    cfg = dict(CONFIG, schedule={"stage1_epochs": 1, "stage2_epochs": 1}, view="sagittal")
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    assert main(["train", "--config", str(p), "--cohort", str(cli_workspace / "cohort")]) == 0
    assert (tmp_path / "root" / "IDH_age_sagittal_s0" / "checkpoints" / "sagittal.pt").exists()
