"""Training-sample construction: tumour masks, max-core slice selection, bounding boxes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cohort import MASK_CORE, MASK_EDEMA, MASK_ENHANCING, CaseRecord
from .errors import DataError
from .preprocess import PreparedCase, PriorFeatures, prepare_case

PLANES = ("axial", "coronal", "sagittal")
PLANE_AXIS = {"axial": 0, "coronal": 1, "sagittal": 2}


def whole_tumor(mask: np.ndarray) -> np.ndarray:
    return np.isin(mask, (MASK_EDEMA, MASK_CORE, MASK_ENHANCING))


def tumor_core(mask: np.ndarray) -> np.ndarray:
    return np.isin(mask, (MASK_CORE, MASK_ENHANCING))


def _axis(plane: str) -> int:
    try:
        return PLANE_AXIS[plane]
    except KeyError:
        raise DataError(f"unknown plane {plane!r}; expected one of {PLANES}") from None


def take_slice(vol: np.ndarray, plane: str, index: int) -> np.ndarray:
    """2-D slice; rows/cols are the two remaining axes in ascending order."""
    return np.take(vol, index, axis=_axis(plane) + vol.ndim - 3)


def select_training_slices(mask: np.ndarray, plane: str) -> list[int]:
    """Indices {n-2, n, n+2} around the slice with the largest tumour-core area.

    Ties go to the lowest index; out-of-range neighbours are clipped and
    duplicates removed.
    """
    ax = _axis(plane)
    core = tumor_core(mask)
    other = tuple(a for a in range(3) if a != ax)
    areas = core.sum(axis=other)
    if areas.max() == 0:
        raise DataError("tumour core is empty")
    n = int(np.argmax(areas))
    last = mask.shape[ax] - 1
    return sorted({min(max(i, 0), last) for i in (n - 2, n, n + 2)})


def mask_to_bbox(slice_mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tightest inclusive box (row_min, col_min, row_max, col_max)."""
    rows = np.flatnonzero(np.any(slice_mask, axis=1))
    cols = np.flatnonzero(np.any(slice_mask, axis=0))
    if rows.size == 0:
        raise DataError("empty slice mask has no bounding box")
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def bbox_to_edges(bbox) -> tuple[float, float, float, float]:
    """Inclusive pixel box -> continuous (row_min, col_min, row_max, col_max) edges."""
    r0, c0, r1, c1 = bbox
    return float(r0), float(c0), float(r1 + 1), float(c1 + 1)


def box_iou(a, b) -> float:
    """IoU of two continuous (row_min, col_min, row_max, col_max) boxes."""
    ih = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iw = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ih * iw
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


@dataclass
class TrainingSample:
    plane: str
    slice_index: int
    channels: np.ndarray  # (C, H, W) float32
    gt_mask: np.ndarray  # (H, W) bool, whole tumour
    gt_bbox: tuple[int, int, int, int]
    gt_class: str
    priors: PriorFeatures | None = None
    case_id: str = ""


def assemble_training_samples(case: CaseRecord | PreparedCase, plane: str, task: str,
                              priors: PriorFeatures | None = None,
                              target_shape=None) -> list[TrainingSample]:
    """Up to three samples (slices n-2, n, n+2); slices without whole tumour are dropped."""
    if isinstance(case, CaseRecord):
        case = prepare_case(case, task, target_shape)
    if case.label not in ("class0", "class1"):
        raise DataError(f"{case.case_id}: label unknown for task {task}")
    whole = whole_tumor(case.mask)
    out = []
    for idx in select_training_slices(case.mask, plane):
        m = take_slice(whole, plane, idx)
        if not m.any():
            continue
        chans = take_slice(case.channels, plane, idx)
        out.append(TrainingSample(plane, idx, np.ascontiguousarray(chans, dtype=np.float32), m,
                                  mask_to_bbox(m), case.label, priors, case.case_id))
    return out
