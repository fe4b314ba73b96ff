"""Intensity normalisation, resampling and prior-feature extraction (age, location)."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import atlas
from .cohort import TASK_MODALITIES, CaseRecord, Volume
from .errors import ConfigError, DataError, DegenerateInputError


@dataclass
class PriorFeatures:
    age_std: float | None = None
    loc_probs: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.loc_probs is not None:
            loc = tuple(float(v) for v in self.loc_probs)
            if len(loc) != len(atlas.REGIONS):
                raise DataError(f"loc_probs needs {len(atlas.REGIONS)} entries, got {len(loc)}")
            if min(loc) < 0 or max(loc) > 1:
                raise DataError("loc_probs components must lie in [0, 1]")
            self.loc_probs = loc


def normalize_intensities(vol: Volume, brain: np.ndarray, lower: float = 5.0,
                          upper: float = 95.0) -> Volume:
    """Z-score using statistics of brain voxels inside the [p_lower, p_upper] band.

    Out-of-band voxels are excluded from the mean/std but the affine map is
    applied to every voxel.
    """
    brain = np.asarray(brain, dtype=bool)
    if brain.shape != vol.data.shape:
        raise DataError(f"brain mask shape {brain.shape} != volume shape {vol.data.shape}")
    if not brain.any():
        raise DataError("brain mask is empty")
    x = vol.data.astype(np.float64)
    inside = x[brain]
    lo, hi = np.percentile(inside, [lower, upper])
    s = inside[(inside >= lo) & (inside <= hi)]
    mu = s.mean()
    # two-pass for accuracy
    sd = np.sqrt(np.mean((s - mu) ** 2))
    if not sd > 0 or sd <= 1e-12 * max(1.0, abs(mu)):
        raise DegenerateInputError("within-brain intensities have zero spread")
    return Volume((x - mu) / sd, vol.spacing)


def resample_volume(vol: Volume | np.ndarray, target_shape, is_mask: bool = False):
    """Trilinear (intensities) or nearest-neighbour (masks) resampling to ``target_shape``.

    Voxel centres are mapped corner-aligned (first and last centres coincide),
    so a linear ramp keeps its endpoints exactly.
    """
    target = tuple(int(t) for t in target_shape)
    if len(target) != 3 or min(target) < 8:
        raise ConfigError(f"target shape must have three axes >= 8, got {target}")
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    if data.shape == target:
        out = data.copy()
    else:
        coords = np.meshgrid(*[np.linspace(0, n - 1, t) for n, t in zip(data.shape, target)],
                             indexing="ij")
        out = ndimage.map_coordinates(data, coords, order=0 if is_mask else 1, mode="nearest")
    if not isinstance(vol, Volume):
        return out
    spacing = tuple(sp * (n - 1) / max(t - 1, 1) for sp, n, t in zip(vol.spacing, data.shape, target))
    return Volume(out, spacing)


def extract_location_features(mask: np.ndarray, atlas_labels: np.ndarray | None = None) -> tuple[float, ...]:
    """Fraction of whole-tumour voxels falling in each atlas region (REGIONS order)."""
    mask = np.asarray(mask)
    lab = atlas.atlas_labels(mask.shape) if atlas_labels is None else np.asarray(atlas_labels)
    if lab.shape != mask.shape:
        raise DataError(f"atlas shape {lab.shape} != mask shape {mask.shape}")
    whole = mask > 0
    total = int(whole.sum())
    if total == 0:
        raise DataError("whole tumour is empty; location features undefined")
    counts = np.bincount(lab[whole & (lab >= 0)].astype(int), minlength=len(atlas.REGIONS))
    return tuple(float(c) / total for c in counts[:len(atlas.REGIONS)])


@dataclass
class FeatureStats:
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)

    @classmethod
    def fit(cls, ages: Sequence[float]) -> "FeatureStats":
        a = np.asarray(ages, dtype=float)
        if a.size == 0:
            raise DataError("cannot fit feature statistics on an empty training split")
        # population std, so the standardised training ages have std exactly 1
        sd = float(a.std())
        return cls({"age": float(a.mean())}, {"age": sd})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "FeatureStats":
        d = json.loads(Path(path).read_text())
        return cls(d["mean"], d["std"])


def standardize_priors(age: float | None, loc_probs, stats: FeatureStats) -> PriorFeatures:
    """Z-score age against training statistics; pass location fractions through."""
    age_std = None
    if age is not None:
        sd = stats.std.get("age", 0.0)
        if not sd > 0 or not math.isfinite(sd):
            raise DegenerateInputError("training age standard deviation is zero")
        age_std = (float(age) - stats.mean["age"]) / sd
    return PriorFeatures(age_std, None if loc_probs is None else tuple(loc_probs))


@dataclass
class PreparedCase:
    """A case resampled to network resolution with normalised channels."""

    case_id: str
    label: str
    channels: np.ndarray  # (C, D, H, W) float32 in modality order
    mask: np.ndarray
    age_years: float
    loc_probs: tuple[float, ...]


def prepare_case(case: CaseRecord, task: str, target_shape=None) -> PreparedCase:
    names = TASK_MODALITIES[task]
    missing = [m for m in names if m not in case.modalities]
    if missing:
        raise ConfigError(f"{case.case_id}: task {task} needs modalities {missing}")
    shape = case.mask.shape if target_shape is None else tuple(target_shape)
    chans = []
    for m in names:
        v = normalize_intensities(case.modalities[m], case.brain)
        chans.append(resample_volume(v, shape).data.astype(np.float32))
    mask = resample_volume(case.mask, shape, is_mask=True).astype(np.uint8)
    loc = extract_location_features(mask)
    return PreparedCase(case.case_id, case.label(task), np.stack(chans), mask, case.age_years, loc)
