"""Three-plane inference: per-plane slice voting and cross-plane 2.5D aggregation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .metrics import BG
from .net import HybridDetector, pack_priors
from .preprocess import PreparedCase, PriorFeatures
from .slicing import PLANES, PLANE_AXIS

ABSTAIN = "abstain"
FG = ("class0", "class1")


@dataclass
class PlanarPrediction:
    plane: str
    votes: dict[str, int] = field(default_factory=lambda: {"class0": 0, "class1": 0})
    confidence: dict[str, float] = field(default_factory=lambda: {"class0": 0.0, "class1": 0.0})
    detected_slices: int = 0
    verdict: str = ABSTAIN
    tie_broken: bool = False


def tally_verdict(votes: Mapping[str, int], confidence: Mapping[str, float] | None = None) -> tuple[str, bool]:
    """Majority over slice votes; even split -> larger summed confidence, then class0."""
    v0, v1 = votes.get("class0", 0), votes.get("class1", 0)
    if v0 + v1 == 0:
        return ABSTAIN, False
    if v0 != v1:
        return ("class0" if v0 > v1 else "class1"), False
    conf = confidence or {}
    c0, c1 = conf.get("class0", 0.0), conf.get("class1", 0.0)
    return ("class1" if c1 > c0 else "class0"), True


def planar_from_votes(plane: str, votes: Mapping[str, int],
                      confidence: Mapping[str, float] | None = None) -> PlanarPrediction:
    verdict, tie = tally_verdict(votes, confidence)
    conf = {"class0": 0.0, "class1": 0.0, **(confidence or {})}
    return PlanarPrediction(plane, {"class0": int(votes.get("class0", 0)), "class1": int(votes.get("class1", 0))},
                            conf, int(sum(votes.values())), verdict, tie)


@torch.no_grad()
def predict_plane(model: HybridDetector, case: PreparedCase, plane: str,
                  priors: PriorFeatures | None = None, batch_size: int = 32) -> PlanarPrediction:
    """Run every slice of ``plane``; each slice with a detection votes for its top detection's class."""
    model.eval()
    ax = PLANE_AXIS[plane] + 1
    chans = torch.as_tensor(np.moveaxis(case.channels, ax, 0).copy(), dtype=torch.float32)
    packed = torch.as_tensor(pack_priors(priors), dtype=torch.float32)
    votes = {"class0": 0, "class1": 0}
    conf = {"class0": 0.0, "class1": 0.0}
    for start in range(0, chans.shape[0], batch_size):
        x = chans[start:start + batch_size]
        dets = model(x, packed.expand(x.shape[0], 10))
        for slice_dets in dets:
            if not slice_dets:
                continue
            top = slice_dets[0]
            votes[top.label] += 1
            conf[top.label] += top.score
    return planar_from_votes(plane, votes, conf)


@dataclass
class FinalPrediction:
    label: str
    verdicts: dict[str, str]
    tie_broken: bool
    score: float
    planes: dict[str, PlanarPrediction] = field(default_factory=dict)


def aggregate_views(p_axial: PlanarPrediction, p_coronal: PlanarPrediction,
                    p_sagittal: PlanarPrediction, bg_score: float = 0.0) -> FinalPrediction:
    """Majority over non-abstaining planes.

    All abstain -> BG. A 1-1 split is broken by total slice votes of the two
    voting planes, then summed confidence, then class0. The case score is the
    pooled class1 vote fraction over all planes (``bg_score`` for BG).
    """
    planes = {p.plane: p for p in (p_axial, p_coronal, p_sagittal)}
    verdicts = {k: p.verdict for k, p in planes.items()}
    plane_tie = any(p.tie_broken for p in planes.values())
    voting = [p for p in planes.values() if p.verdict != ABSTAIN]
    total0 = sum(p.votes["class0"] for p in planes.values())
    total1 = sum(p.votes["class1"] for p in planes.values())
    if not voting:
        return FinalPrediction(BG, verdicts, plane_tie, float(bg_score), planes)
    score = total1 / (total0 + total1)
    n0 = sum(p.verdict == "class0" for p in voting)
    n1 = len(voting) - n0
    if n0 != n1:
        return FinalPrediction("class0" if n0 > n1 else "class1", verdicts, plane_tie, score, planes)
    v0 = sum(p.votes["class0"] for p in voting)
    v1 = sum(p.votes["class1"] for p in voting)
    if v0 != v1:
        label = "class0" if v0 > v1 else "class1"
    else:
        c0 = sum(p.confidence["class0"] for p in voting)
        c1 = sum(p.confidence["class1"] for p in voting)
        label = "class1" if c1 > c0 else "class0"
    return FinalPrediction(label, verdicts, True, score, planes)


def predict_case(models: Mapping[str, HybridDetector], case: PreparedCase,
                 priors: PriorFeatures | None = None, bg_score: float = 0.0) -> FinalPrediction:
    preds = [predict_plane(models[p], case, p, priors) for p in PLANES]
    return aggregate_views(*preds, bg_score=bg_score)


def single_plane_prediction(pred: PlanarPrediction, bg_score: float = 0.0) -> FinalPrediction:
    """Case-level prediction from one planar model (used for the per-plane ablation)."""
    empty = {p: PlanarPrediction(p) for p in PLANES if p != pred.plane}
    ordered = [pred if p == pred.plane else empty[p] for p in PLANES]
    return aggregate_views(*ordered, bg_score=bg_score)


PRED_FIELDS = ["case_id", "task", "label", "final", "score", "tie_broken"] + [
    f"{p}_{k}" for p in PLANES for k in ("verdict", "votes_class0", "votes_class1", "tie")]


def prediction_row(case_id: str, task: str, true_label: str, pred: FinalPrediction) -> dict:
    row = {"case_id": case_id, "task": task, "label": true_label, "final": pred.label,
           "score": f"{pred.score:.6f}", "tie_broken": int(pred.tie_broken)}
    for p in PLANES:
        pp = pred.planes.get(p, PlanarPrediction(p))
        row.update({f"{p}_verdict": pp.verdict, f"{p}_votes_class0": pp.votes["class0"],
                    f"{p}_votes_class1": pp.votes["class1"], f"{p}_tie": int(pp.tie_broken)})
    return row


def write_predictions(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=PRED_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_predictions(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["score"] = float(r["score"])
    return rows
