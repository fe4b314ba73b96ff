import json

import numpy as np
import pytest

from glioma25d.cohort import PhantomSpec, generate_cohort
from glioma25d.net import ModelConfig
from glioma25d.preprocess import FeatureStats, prepare_case

SMALL_SHAPE = (32, 32, 32)


@pytest.fixture(scope="session")
def small_spec():
    return PhantomSpec(shape=SMALL_SHAPE, radius_range=(3.0, 5.0))


@pytest.fixture(scope="session")
def small_cohort(small_spec):
    return generate_cohort(small_spec, {"mut": 0.5, "wt": 0.5}, 8, seed=0, task="IDH")


@pytest.fixture(scope="session")
def prepared_small(small_cohort):
    return [prepare_case(c, "IDH") for c in small_cohort]


@pytest.fixture(scope="session")
def small_stats(prepared_small):
    return FeatureStats.fit([c.age_years for c in prepared_small])


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(input_channels=3, backbone="tiny", base_width=8, fpn_channels=16, roi_hidden=32,
                fusion_hidden=16)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CLI_CONFIG = {
    "task": "IDH", "fusion_mode": "age", "view": "axial", "n_cases": 20,
    "spec": {"shape": [32, 32, 32], "radius_range": [3.0, 5.0]},
    "class_fractions": {"mut": 0.5, "wt": 0.5}, "splits": {"train": 0.7, "internal": 0.3},
    "network_shape": [32, 32, 32],
    "model": {"base_width": 8, "fpn_channels": 16, "roi_hidden": 32, "fusion_hidden": 16},
    "schedule": {"stage1_epochs": 1, "stage2_epochs": 1}, "seed": 0,
}


@pytest.fixture(scope="session")
def cli_workspace(tmp_path_factory):
    """Generated cohort plus one trained axial run, built through the CLI."""
    from glioma25d.cli import main

    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(CLI_CONFIG))
    assert main(["generate", "--config", str(cfg), "--out", str(root / "cohort")]) == 0
    assert main(["train", "--config", str(cfg), "--cohort", str(root / "cohort"), "--run", str(root / "run")]) == 0
    assert main(["predict", "--run", str(root / "run"), "--cohort", str(root / "cohort")]) == 0
    return root


# one summary line per acceptance criterion
_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        detail = dict(report.user_properties).get("detail", "")
        _ACCEPTANCE[name] = ("PASS" if report.outcome == "passed" else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        status, detail = _ACCEPTANCE[name]
        num = int(name.split("_")[2])
        terminalreporter.write_line(f"criterion {num:2d}: {status}  {detail}")
