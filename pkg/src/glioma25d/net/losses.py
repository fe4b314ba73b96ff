"""Multi-task loss: RPN objectness/box, head class/box, mask BCE."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from ..errors import NumericError
from .config import LOSS_NAMES, ModelConfig

log = logging.getLogger(__name__)


def class_weighted_ce(logits: torch.Tensor, target: torch.Tensor, weights,
                      reduction: str = "mean") -> torch.Tensor:
    """-w[t] * log softmax(logits)[t] per row.

    ``reduction="mean"`` divides by the summed weights of the targets (the
    weighted mean), ``"sum"`` adds, ``"none"`` returns per-row losses.
    """
    w = torch.as_tensor(weights, dtype=logits.dtype, device=logits.device)
    if (w <= 0).any():
        raise ValueError("class weights must be positive")
    logp = torch.log_softmax(logits, dim=-1)
    wt = w[target]
    per = -wt * logp.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    if reduction == "none":
        return per
    if reduction == "sum":
        return per.sum()
    if reduction == "mean":
        return per.sum() / wt.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def smooth_l1(pred, target, beta=1.0 / 9):
    return F.smooth_l1_loss(pred, target, beta=beta, reduction="sum")


@dataclass
class LossBundle:
    rpn_objectness: torch.Tensor
    rpn_box: torch.Tensor
    head_class: torch.Tensor
    head_box: torch.Tensor
    head_mask: torch.Tensor
    total: torch.Tensor
    degenerate: bool = False

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in LOSS_NAMES + ("total",)}


def multitask_loss(outputs: dict, targets: dict, config: ModelConfig) -> LossBundle:
    """Combine the five detector losses.

    ``outputs``/``targets`` hold the sampled quantities the detector emits in
    training mode:

    * ``rpn_logits`` / ``rpn_labels`` (sampled anchors, 1 = object)
    * ``rpn_deltas`` / ``rpn_deltas`` (positive anchors only)
    * ``cls_logits`` / ``cls_labels`` (sampled ROIs, 0 = BG)
    * ``box_deltas`` / ``box_deltas`` (positive ROIs only)
    * ``mask_logits`` / ``mask`` (positive ROIs only, M x M)

    Box losses are normalised by the number of sampled anchors/ROIs. When no
    positive ROI exists only the classification terms carry signal and the
    batch is flagged as degenerate.
    """
    rpn_logits = outputs["rpn_logits"]
    rpn_labels = targets["rpn_labels"].to(rpn_logits.dtype)
    n_anchor = max(1, rpn_logits.numel())
    rpn_obj = F.binary_cross_entropy_with_logits(rpn_logits, rpn_labels, reduction="sum") / n_anchor
    rpn_box = smooth_l1(outputs["rpn_deltas"], targets["rpn_deltas"]) / n_anchor

    cls_logits = outputs["cls_logits"]
    head_class = class_weighted_ce(cls_logits, targets["cls_labels"], config.class_weights)
    n_roi = max(1, cls_logits.shape[0])
    degenerate = outputs["box_deltas"].shape[0] == 0
    if degenerate:
        log.warning("no positive ROI in batch; box and mask heads receive no signal")
        head_box = cls_logits.sum() * 0.0
        head_mask = cls_logits.sum() * 0.0
    else:
        head_box = smooth_l1(outputs["box_deltas"], targets["box_deltas"]) / n_roi
        head_mask = F.binary_cross_entropy_with_logits(outputs["mask_logits"], targets["mask"])
    parts = {"rpn_objectness": rpn_obj, "rpn_box": rpn_box, "head_class": head_class,
             "head_box": head_box, "head_mask": head_mask}
    total = sum(config.loss_weight(k) * v for k, v in parts.items())
    if not torch.isfinite(total):
        bad = [k for k, v in parts.items() if not torch.isfinite(v)]
        raise NumericError(f"non-finite loss component(s): {bad}")
    return LossBundle(total=total, degenerate=degenerate, **parts)
