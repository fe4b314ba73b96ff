"""Experiment configuration and the train/predict flow shared by the CLI and the end-to-end run."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .cohort import TASK_MODALITIES, CaseRecord, PhantomSpec
from .errors import ConfigError, DataError
from .infer import FinalPrediction, PlanarPrediction, aggregate_views, predict_plane, single_plane_prediction
from .net import FUSION_MODES, HybridDetector, ModelConfig, build_model
from .preprocess import FeatureStats, PreparedCase, PriorFeatures, prepare_case, standardize_priors
from .slicing import PLANES, assemble_training_samples
from .train import Schedule, TrainResult, class_weights_from_labels, two_stage_train

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
VIEWS = PLANES + ("2.5D",)


@dataclass
class ExperimentConfig:
    task: str = "IDH"
    fusion_mode: str = "none"
    view: str = "2.5D"
    cohort: str | None = None
    spec: dict = field(default_factory=dict)
    n_cases: int = 300
    class_fractions: dict = field(default_factory=lambda: {"mut": 0.4, "wt": 0.6})
    splits: dict = field(default_factory=lambda: {"train": 0.8, "internal": 0.2})
    network_shape: tuple[int, int, int] = (64, 64, 64)
    model: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: str = "runs"
    bootstrap_resamples: int = 1000
    ci_percentiles: tuple[float, float] = (5.0, 95.0)
    bg_score: float = 0.0
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {self.schema_version}")
        if self.task not in TASK_MODALITIES:
            raise ConfigError(f"task: must be one of {sorted(TASK_MODALITIES)}, got {self.task!r}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode: must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.view not in VIEWS:
            raise ConfigError(f"view: must be one of {VIEWS}, got {self.view!r}")
        if self.n_cases < 1:
            raise ConfigError("n_cases: must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed: must be >= 0")
        if tuple(self.ci_percentiles) not in ((5.0, 95.0), (2.5, 97.5)):
            raise ConfigError("ci_percentiles: must be [5, 95] or [2.5, 97.5]")
        try:
            self.phantom_spec().validate()
        except (ConfigError, TypeError) as exc:
            raise ConfigError(f"spec: {exc}") from None
        try:
            self.model_config(input_channels=len(TASK_MODALITIES[self.task]))
        except (ConfigError, TypeError) as exc:
            raise ConfigError(f"model: {exc}") from None
        try:
            self.schedule_obj()
        except (ConfigError, TypeError) as exc:
            raise ConfigError(f"schedule: {exc}") from None

    def phantom_spec(self) -> PhantomSpec:
        base = PhantomSpec().to_dict()
        base.update(self.spec)
        return PhantomSpec.from_dict(base)

    def model_config(self, **over) -> ModelConfig:
        d = {"input_channels": len(TASK_MODALITIES[self.task]), "fusion_mode": self.fusion_mode}
        d.update(self.model)
        d.update(over)
        return ModelConfig.from_dict(d)

    def schedule_obj(self) -> Schedule:
        known = {f.name for f in fields(Schedule)}
        unknown = set(self.schedule) - known
        if unknown:
            raise ConfigError(f"unknown field(s) {sorted(unknown)}")
        return Schedule(**self.schedule)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network_shape"] = list(self.network_shape)
        d["ci_percentiles"] = list(self.ci_percentiles)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(f"{k}: unknown field")
        kw = dict(d)
        for k in ("network_shape", "ci_percentiles"):
            if k in kw:
                if not isinstance(kw[k], (list, tuple)):
                    raise ConfigError(f"{k}: expected a list")
                kw[k] = tuple(kw[k])
        types = {"task": str, "fusion_mode": str, "view": str, "n_cases": int, "seed": int,
                 "spec": dict, "model": dict, "schedule": dict, "class_fractions": dict, "splits": dict}
        for k, t in types.items():
            if k in kw and not isinstance(kw[k], t):
                raise ConfigError(f"{k}: expected {t.__name__}, got {type(kw[k]).__name__}")
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        if not Path(path).exists():
            raise ConfigError(f"config file not found: {path}")
        text = Path(path).read_text()
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


# -- priors


def fit_feature_stats(train: Sequence[PreparedCase]) -> FeatureStats:
    return FeatureStats.fit([c.age_years for c in train])


def case_priors(case: PreparedCase, stats: FeatureStats) -> PriorFeatures:
    return standardize_priors(case.age_years, case.loc_probs, stats)


def prepare_cases(cases: Iterable[CaseRecord], task: str, shape) -> list[PreparedCase]:
    return [prepare_case(c, task, shape) for c in cases]


# -- planar training and prediction


def training_samples(train: Sequence[PreparedCase], plane: str, task: str, stats: FeatureStats):
    out = []
    for c in train:
        out.extend(assemble_training_samples(c, plane, task, case_priors(c, stats)))
    return out


def train_plane(train: Sequence[PreparedCase], plane: str, task: str, model_cfg: ModelConfig,
                schedule: Schedule, stats: FeatureStats, seed: int,
                class_weights: bool = True) -> TrainResult:
    samples = training_samples(train, plane, task, stats)
    if not samples:
        raise DataError("no training samples could be assembled")
    if class_weights and tuple(model_cfg.class_weights) == (1.0, 1.0, 1.0):
        model_cfg.class_weights = class_weights_from_labels([c.label for c in train])
    model = build_model(model_cfg, seed)
    return two_stage_train(model, samples, schedule, seed)


def predict_planes(models: Mapping[str, HybridDetector], cases: Sequence[PreparedCase],
                   stats: FeatureStats) -> dict[str, dict[str, PlanarPrediction]]:
    """{case_id: {plane: PlanarPrediction}} for every plane that has a model."""
    out = {}
    for c in cases:
        pri = case_priors(c, stats)
        out[c.case_id] = {p: predict_plane(m, c, p, pri) for p, m in models.items()}
    return out


def combine(planar: Mapping[str, PlanarPrediction], view: str, bg_score: float = 0.0) -> FinalPrediction:
    if view == "2.5D":
        return aggregate_views(*(planar[p] for p in PLANES), bg_score=bg_score)
    return single_plane_prediction(planar[view], bg_score=bg_score)


# -- checkpoints


def save_checkpoint(path, model: HybridDetector, stats: FeatureStats, task: str, plane: str) -> None:
    torch.save({"version": 1, "state_dict": model.state_dict(), "model_config": model.config.to_dict(),
                "feature_stats": asdict(stats), "fusion_mode": model.config.fusion_mode,
                "task": task, "plane": plane}, path)


def load_checkpoint(path) -> tuple[HybridDetector, FeatureStats, dict]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"checkpoint not found: {p}")
    blob = torch.load(p, map_location="cpu", weights_only=False)
    cfg = ModelConfig.from_dict(blob["model_config"])
    model = build_model(cfg, 0)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    stats = FeatureStats(blob["feature_stats"]["mean"], blob["feature_stats"]["std"])
    return model, stats, {"task": blob["task"], "plane": blob["plane"]}


def scores_and_labels(preds: Mapping[str, FinalPrediction], cases: Sequence[PreparedCase]):
    labels = [c.label for c in cases]
    finals = [preds[c.case_id].label for c in cases]
    scores = np.array([preds[c.case_id].score for c in cases])
    return finals, labels, scores
