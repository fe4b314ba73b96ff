import csv
from collections import Counter

import numpy as np
import pytest
import torch
from conftest import tiny_model_config
from hypothesis import given, settings
from hypothesis import strategies as st

from glioma25d.errors import ConfigError, StratificationError
from glioma25d.experiment import training_samples
from glioma25d.net import build_model
from glioma25d.slicing import mask_to_bbox
from glioma25d.train import (Schedule, augment_sample, class_weights_from_labels, random_search, sample_space,
                             stratified_folds, two_stage_train)


def test_schedule_scaling_and_validation():
    assert Schedule(epoch_scale=0.2).scaled_epochs() == (15, 25)
    assert Schedule(epoch_scale=0.01).scaled_epochs() == (1, 2)
    with pytest.raises(ConfigError):
        Schedule(lr=0.0)
    with pytest.raises(ConfigError):
        Schedule(mirror_p=1.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(10, 80), st.integers(2, 6), st.integers(0, 99))
def test_stratified_folds_balanced(n, k, seed):
    labels = ["a" if i % 3 == 0 else "b" for i in range(n)]
    if min(Counter(labels).values()) < k:
        with pytest.raises(StratificationError):
            stratified_folds(labels, k, seed)
        return
    folds = stratified_folds(labels, k, seed)
    assert set(folds) == set(range(k))
    share = labels.count("a") / n
    for f in range(k):
        members = [l for l, g in zip(labels, folds) if g == f]
        assert abs(members.count("a") - len(members) * share) <= 1 + 1e-9


def test_random_search_picks_best_and_logs(tmp_path):
    space = {"lr": [0.1, 0.01, 0.001], "width": [8, 16]}
    res = random_search(space, 6, lambda cfg: [cfg["width"] / 16 - cfg["lr"]] * 3, seed=0)
    means = [r["mean_auroc"] for r in res.table]
    assert res.best == {k: res.table[int(np.argmax(means))][k] for k in space}
    res.write_table(tmp_path / "search.csv")
    with open(tmp_path / "search.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 6
    assert sample_space(space, 4, 1) == sample_space(space, 4, 1)
    with pytest.raises(ConfigError):
        sample_space({}, 2, 0)


def test_class_weights_inverse_frequency():
    w = class_weights_from_labels(["class0"] * 3 + ["class1"])
    assert w[0] == 1.0
    assert w[2] / w[1] == pytest.approx(3.0)
    assert (w[1] + w[2]) / 2 == pytest.approx(1.0)


@pytest.fixture(scope="module")
def samples(prepared_small, small_stats):
    return training_samples(prepared_small[:4], "axial", "IDH", small_stats)


def test_augment_mirror_recomputes_bbox(samples):
    s = samples[0]
    out = augment_sample(s, np.random.default_rng(0), mirror_p=1.0, rotate_p=0.0)
    assert np.array_equal(out.gt_mask, s.gt_mask[:, ::-1])
    assert np.array_equal(out.channels, s.channels[:, :, ::-1])
    assert out.gt_bbox == mask_to_bbox(out.gt_mask)
    assert out.priors is s.priors


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_augment_rotation_keeps_contract(seed):
    rng = np.random.default_rng(seed)
    base = _SAMPLES[seed % len(_SAMPLES)]
    out = augment_sample(base, rng, rotation_deg=15.0, mirror_p=0.5, rotate_p=1.0)
    assert out.gt_mask.any()
    assert out.gt_bbox == mask_to_bbox(out.gt_mask)
    assert out.channels.shape == base.channels.shape


def test_augment_noop_returns_same(samples):
    assert augment_sample(samples[0], np.random.default_rng(0), mirror_p=0.0, rotate_p=0.0) is samples[0]


_SAMPLES = []


@pytest.fixture(autouse=True, scope="module")
def _share(samples):
    _SAMPLES[:] = samples


def test_two_stage_freeze_and_clip(samples, tmp_path):
    model = build_model(tiny_model_config(), seed=0)
    body0 = {k: v.clone() for k, v in model.body.state_dict().items()}
    seen = {}

    def on_epoch(row):
        if row["stage"] == 1:
            seen["stage1_body"] = {k: v.clone() for k, v in model.body.state_dict().items()}
            seen["stage1_heads"] = model.box_reg.weight.detach().clone()

    sched = Schedule(stage1_epochs=2, stage2_epochs=2, lr=0.05, clip_norm=0.5)
    res = two_stage_train(model, samples, sched, seed=0, on_epoch=on_epoch)
    # backbone body (weights and batch-norm buffers) untouched through stage 1
    assert all(torch.equal(body0[k], seen["stage1_body"][k]) for k in body0)
    assert not torch.equal(seen["stage1_heads"], build_model(tiny_model_config(), seed=0).box_reg.weight)
    # stage 2 moves the body
    assert any(not torch.equal(body0[k], v) for k, v in model.body.state_dict().items())
    assert max(res.grad_norms) <= 0.5 + 1e-6
    assert [r["stage"] for r in res.history] == [1, 1, 2, 2]
    res.write_history(tmp_path / "history.csv")
    with open(tmp_path / "history.csv") as fh:
        assert list(csv.DictReader(fh))[0].keys() >= {"epoch", "stage", "total"}


def test_training_deterministic(samples):
    sched = Schedule(stage1_epochs=1, stage2_epochs=1)
    a = two_stage_train(build_model(tiny_model_config(), 0), samples, sched, seed=3, max_steps=2)
    b = two_stage_train(build_model(tiny_model_config(), 0), samples, sched, seed=3, max_steps=2)
    assert a.history == b.history
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
