"""Training protocol: stratified folds, random search, augmentation, two-stage SGD."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from scipy import ndimage

from .cohort import stratified_assign
from .errors import ConfigError, DataError, NumericError, StratificationError
from .net import HybridDetector, stack_priors
from .net.config import LOSS_NAMES
from .slicing import TrainingSample, mask_to_bbox

log = logging.getLogger(__name__)


@dataclass
class Schedule:
    stage1_epochs: int = 75
    stage2_epochs: int = 125
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 4
    clip_norm: float = 5.0
    weight_decay: float = 1e-4
    epoch_scale: float = 1.0
    rotation_deg: float = 15.0
    mirror_p: float = 0.5
    rotate_p: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise ConfigError("both stages need at least one epoch")
        if not self.lr > 0:
            raise ConfigError("learning rate must be > 0")
        if not self.clip_norm > 0:
            raise ConfigError("gradient clip norm must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if not self.epoch_scale > 0:
            raise ConfigError("epoch scale must be > 0")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("weight decay must be >= 0 and momentum in [0, 1)")
        for p in (self.mirror_p, self.rotate_p):
            if not 0 <= p <= 1:
                raise ConfigError("augmentation probabilities must lie in [0, 1]")

    def scaled_epochs(self) -> tuple[int, int]:
        return (math.ceil(self.stage1_epochs * self.epoch_scale),
                math.ceil(self.stage2_epochs * self.epoch_scale))

    def to_dict(self) -> dict:
        return asdict(self)


# -- cross-validation and search


def stratified_folds(labels: Sequence[str], k: int = 5, seed: int = 0) -> list[int]:
    """Fold index per item; per-fold class counts stay within one of the global ratio."""
    if k < 2:
        raise ConfigError("k must be >= 2")
    for c in set(labels):
        n = list(labels).count(c)
        if n < k:
            raise StratificationError(f"class {c!r} has {n} member(s), fewer than k={k}")
    return stratified_assign(list(labels), [1.0 / k] * k, seed)


def sample_space(space: Mapping[str, Sequence], budget: int, seed: int) -> list[dict]:
    if budget < 1:
        raise ConfigError("search budget must be >= 1")
    if not space or any(len(v) == 0 for v in space.values()):
        raise ConfigError("search space is empty")
    rng = np.random.default_rng(seed)
    keys = sorted(space)
    return [{k: space[k][int(rng.integers(len(space[k])))] for k in keys} for _ in range(budget)]


DESK_SPACE = {"lr": [1e-2, 1e-3, 1e-4], "fusion_hidden": [64, 128], "score_threshold": [0.3, 0.5, 0.7]}


@dataclass
class SearchResult:
    best: dict
    table: list[dict] = field(default_factory=list)

    def write_table(self, path) -> None:
        rows = self.table
        keys = list(rows[0].keys()) if rows else []
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)


def random_search(space: Mapping[str, Sequence], budget: int,
                  cv_runner: Callable[[dict], Sequence[float]], seed: int = 0) -> SearchResult:
    """Evaluate ``budget`` configurations drawn uniformly; pick the best mean held-out AUROC.

    ``cv_runner(config)`` returns one held-out AUROC per fold. Ties keep the
    earlier trial.
    """
    trials = sample_space(space, budget, seed)
    table = []
    best, best_score = None, -math.inf
    for i, cfg in enumerate(trials):
        scores = [float(s) for s in cv_runner(dict(cfg))]
        mean = float(np.mean(scores))
        row = {"trial": i, **cfg, **{f"fold{j}_auroc": s for j, s in enumerate(scores)},
               "mean_auroc": mean}
        table.append(row)
        if mean > best_score:
            best, best_score = dict(cfg), mean
    return SearchResult(best, table)


# -- augmentation


def augment_sample(sample: TrainingSample, rng: np.random.Generator,
                   rotation_deg: float = 15.0, mirror_p: float = 0.5,
                   rotate_p: float = 0.5) -> TrainingSample:
    """Independent coins for a left-right mirror and a small in-plane rotation."""
    chans, mask = sample.channels, sample.gt_mask
    changed = False
    if rng.random() < mirror_p:
        chans = chans[:, :, ::-1]
        mask = mask[:, ::-1]
        changed = True
    if rng.random() < rotate_p:
        angle = float(rng.uniform(-rotation_deg, rotation_deg))
        rot_mask = ndimage.rotate(mask.astype(np.float32), angle, axes=(1, 0), reshape=False,
                                  order=1, mode="constant") >= 0.5
        # a rotation that loses the tumour is skipped
        if rot_mask.any():
            chans = ndimage.rotate(chans, angle, axes=(2, 1), reshape=False, order=1, mode="nearest")
            mask = rot_mask
            changed = True
    if not changed:
        return sample
    mask = np.ascontiguousarray(mask)
    return replace(sample, channels=np.ascontiguousarray(chans, dtype=np.float32), gt_mask=mask,
                   gt_bbox=mask_to_bbox(mask))


# -- two-stage training


def class_weights_from_labels(labels: Sequence[str]) -> tuple[float, float, float]:
    """(BG, class0, class1) weights: BG 1, foreground inverse frequency normalised to mean 1."""
    counts = np.array([list(labels).count("class0"), list(labels).count("class1")], dtype=float)
    if (counts == 0).any():
        raise DataError("both classes must be present to derive class weights")
    inv = 1.0 / counts
    inv = inv / inv.mean()
    return (1.0, float(inv[0]), float(inv[1]))


def collate(samples: Sequence[TrainingSample]):
    images = torch.as_tensor(np.stack([s.channels for s in samples]), dtype=torch.float32)
    boxes = torch.tensor([[c0, r0, c1 + 1, r1 + 1] for r0, c0, r1, c1 in (s.gt_bbox for s in samples)],
                         dtype=torch.float32)
    labels = torch.tensor([1 if s.gt_class == "class0" else 2 for s in samples])
    masks = torch.as_tensor(np.stack([s.gt_mask for s in samples]), dtype=torch.float32)
    priors = stack_priors([s.priors for s in samples])
    return images, priors, {"boxes": boxes, "labels": labels, "masks": masks}


def _param_groups(params, model: torch.nn.Module, weight_decay: float):
    bn_ids = set()
    for m in model.modules():
        if isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
            bn_ids.update(id(p) for p in m.parameters())
    decay = [p for p in params if id(p) not in bn_ids]
    no_decay = [p for p in params if id(p) in bn_ids]
    return [{"params": decay, "weight_decay": weight_decay},
            {"params": no_decay, "weight_decay": 0.0}]


@dataclass
class TrainResult:
    model: HybridDetector
    history: list[dict]
    grad_norms: list[float]
    # global norms before clipping
    raw_grad_norms: list[float] = field(default_factory=list)

    def write_history(self, path) -> None:
        keys = ["epoch", "stage", *LOSS_NAMES, "total"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
            w.writeheader()
            for row in self.history:
                w.writerow({k: row[k] for k in keys})


def _global_norm(params) -> float:
    norms = [p.grad.detach().norm() for p in params if p.grad is not None]
    return float(torch.linalg.vector_norm(torch.stack(norms))) if norms else 0.0


def two_stage_train(model: HybridDetector, samples: Sequence[TrainingSample], schedule: Schedule,
                    seed: int = 0, snapshot_dir=None, max_steps: int | None = None,
                    on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Stage 1 trains everything but the backbone body; stage 2 trains the whole network.

    SGD with momentum, L2 on all non-batch-norm parameters, global gradient
    norm clipped at ``schedule.clip_norm``. ``max_steps`` caps the number of
    optimiser steps per stage (for smoke tests).
    """
    if not samples:
        raise DataError("no training samples")
    schedule.validate()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    e1, e2 = schedule.scaled_epochs()
    history: list[dict] = []
    grad_norms: list[float] = []
    raw_norms: list[float] = []
    epoch = 0
    for stage, n_epochs in ((1, e1), (2, e2)):
        backbone = set(id(p) for p in model.backbone_parameters())
        for p in model.parameters():
            p.requires_grad_(stage == 2 or id(p) not in backbone)
        model.train()
        if stage == 1:
            # frozen backbone keeps its batch-norm statistics as well
            for m in model.backbone_modules():
                m.eval()
        params = [p for p in model.parameters() if p.requires_grad]
        opt = torch.optim.SGD(_param_groups(params, model, schedule.weight_decay),
                              lr=schedule.lr, momentum=schedule.momentum)
        steps = 0
        for _ in range(n_epochs):
            epoch += 1
            order = rng.permutation(len(samples))
            sums = {k: 0.0 for k in (*LOSS_NAMES, "total")}
            n_batches = 0
            for start in range(0, len(order), schedule.batch_size):
                if max_steps is not None and steps >= max_steps:
                    break
                batch = [augment_sample(samples[i], rng, schedule.rotation_deg, schedule.mirror_p,
                                        schedule.rotate_p) for i in order[start:start + schedule.batch_size]]
                images, priors, targets = collate(batch)
                try:
                    losses = model(images, priors, targets)
                except NumericError as exc:
                    _snapshot(model, snapshot_dir, epoch, stage)
                    raise NumericError(f"stage {stage} epoch {epoch}: {exc}") from exc
                opt.zero_grad(set_to_none=True)
                losses.total.backward()
                raw_norms.append(float(torch.nn.utils.clip_grad_norm_(params, schedule.clip_norm)))
                grad_norms.append(_global_norm(params))
                opt.step()
                for k, v in losses.as_floats().items():
                    sums[k] += v
                n_batches += 1
                steps += 1
            row = {"epoch": epoch, "stage": stage, **{k: v / max(n_batches, 1) for k, v in sums.items()}}
            history.append(row)
            if on_epoch:
                on_epoch(row)
            log.info("epoch %d stage %d total %.4f", epoch, stage, row["total"])
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    return TrainResult(model, history, grad_norms, raw_norms)


def _snapshot(model, snapshot_dir, epoch, stage):
    if snapshot_dir is None:
        return
    path = Path(snapshot_dir) / f"diagnostic_stage{stage}_epoch{epoch}.pt"
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    log.error("non-finite loss; model state written to %s", path)

