"""Late fusion of prior-knowledge features into the classification branch."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
from torch import nn

from ..errors import ConfigError, DataError
from .config import FUSION_MODES, PRIOR_DIMS

# slots of the packed 10-vector: [age_std, loc_0 .. loc_8]
_SLOTS = {"none": [], "age": [0], "loc": list(range(1, 10)), "age+loc": list(range(10))}


def pack_priors(priors) -> np.ndarray:
    """PriorFeatures (or None) -> length-10 float vector, NaN where a prior is absent."""
    out = np.full(10, np.nan)
    if priors is None:
        return out
    age = getattr(priors, "age_std", None)
    loc = getattr(priors, "loc_probs", None)
    if age is not None and math.isfinite(age):
        out[0] = age
    if loc is not None:
        out[1:] = np.asarray(loc, dtype=float)
    return out


def select_priors(packed: torch.Tensor, mode: str) -> torch.Tensor:
    """Columns of a packed (N, 10) prior tensor used by ``mode``; absent values raise."""
    if mode not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {mode!r}")
    cols = packed[:, _SLOTS[mode]]
    if cols.numel() and not torch.isfinite(cols).all():
        raise DataError(f"fusion mode {mode!r} needs priors that are missing from the sample")
    return cols


def fuse_priors(roi_features: torch.Tensor, priors, mode: str) -> torch.Tensor:
    """Concatenate the mode's prior slots after the ROI feature vector(s).

    ``priors`` is either a packed (N, 10) tensor aligned with ``roi_features``
    or a single PriorFeatures broadcast over every ROI.
    """
    if mode not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {mode!r}")
    if mode == "none":
        return roi_features
    single = roi_features.dim() == 1
    feats = roi_features.unsqueeze(0) if single else roi_features
    if not torch.is_tensor(priors):
        packed = torch.as_tensor(pack_priors(priors), dtype=feats.dtype).expand(feats.shape[0], 10)
    else:
        packed = priors.to(feats.dtype)
        if packed.dim() == 1:
            packed = packed.expand(feats.shape[0], -1)
    out = torch.cat([feats, select_priors(packed, mode)], dim=1)
    return out[0] if single else out


class FusionClassifier(nn.Module):
    """FC over [roi vector, priors] followed by the 3-way (BG, class0, class1) layer."""

    def __init__(self, roi_dim: int, mode: str, hidden: int, num_classes: int = 3):
        super().__init__()
        self.mode = mode
        self.fc = nn.Linear(roi_dim + PRIOR_DIMS[mode], hidden)
        self.cls = nn.Linear(hidden, num_classes)

    def forward(self, roi_vec: torch.Tensor, packed_priors: torch.Tensor | None) -> torch.Tensor:
        if self.mode != "none" and packed_priors is None:
            raise DataError(f"fusion mode {self.mode!r} requires priors")
        x = fuse_priors(roi_vec, packed_priors, self.mode) if self.mode != "none" else roi_vec
        return self.cls(torch.relu(self.fc(x)))


def stack_priors(priors: Sequence) -> torch.Tensor:
    return torch.as_tensor(np.stack([pack_priors(p) for p in priors]), dtype=torch.float32)
