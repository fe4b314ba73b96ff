"""Two-stage hybrid detector: backbone+FPN, RPN, ROI align, fused class/box head, mask head.

Internally boxes are (x1, y1, x2, y2) in pixel-edge coordinates with x the
column. :class:`Detection` reports (row_min, col_min, row_max, col_max) in the
same edge coordinates. Every training image carries exactly one tumour box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import (batched_nms, box_iou, clip_boxes_to_image, nms, remove_small_boxes,
                             roi_align)

from ..errors import NumericError
from .backbone import build_backbone
from .config import ModelConfig
from .fusion import FusionClassifier
from .losses import LossBundle, multitask_loss

LABELS = ("BG", "class0", "class1")
_CLAMP = math.log(1000.0 / 16)


@dataclass
class Detection:
    bbox: tuple[float, float, float, float]
    class_scores: np.ndarray  # (BG, class0, class1)
    mask: np.ndarray | None = None

    @property
    def score(self) -> float:
        """Detection confidence = 1 - p(BG)."""
        return float(1.0 - self.class_scores[0])

    @property
    def label(self) -> str:
        return "class0" if self.class_scores[1] >= self.class_scores[2] else "class1"


def encode(ref: torch.Tensor, boxes: torch.Tensor, weights) -> torch.Tensor:
    """Regression deltas that move ``ref`` boxes onto ``boxes``."""
    wx, wy, ww, wh = weights
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    gw = boxes[:, 2] - boxes[:, 0]
    gh = boxes[:, 3] - boxes[:, 1]
    gx = boxes[:, 0] + 0.5 * gw
    gy = boxes[:, 1] + 0.5 * gh
    return torch.stack([wx * (gx - rx) / rw, wy * (gy - ry) / rh,
                        ww * torch.log(gw / rw), wh * torch.log(gh / rh)], dim=1)


def decode(ref: torch.Tensor, deltas: torch.Tensor, weights) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = (deltas[:, 2] / ww).clamp(max=_CLAMP)
    dh = (deltas[:, 3] / wh).clamp(max=_CLAMP)
    cx, cy = rx + dx * rw, ry + dy * rh
    w, h = rw * torch.exp(dw), rh * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


RPN_WEIGHTS = (1.0, 1.0, 1.0, 1.0)
HEAD_WEIGHTS = (10.0, 10.0, 5.0, 5.0)


def grid_roi_align(feat: torch.Tensor, rois: torch.Tensor, size: int, stride: int,
                   sampling_ratio: int = 1) -> torch.Tensor:
    """ROI align (aligned, ``sampling_ratio``^2 bilinear samples per bin) via grid_sample.

    Numerically matches ``torchvision.ops.roi_align(..., aligned=True)`` with
    the same sampling ratio inside the feature map; its CPU backward is much
    faster.
    """
    k = rois.shape[0]
    h, w = feat.shape[-2:]
    n = sampling_ratio * size
    t = (torch.arange(n, dtype=feat.dtype, device=feat.device) + 0.5) / n
    x1, y1, x2, y2 = (rois[:, i:i + 1] for i in range(1, 5))
    xs = (x1 + t * (x2 - x1)) * (2.0 / (stride * w)) - 1.0
    ys = (y1 + t * (y2 - y1)) * (2.0 / (stride * h)) - 1.0
    grid = torch.stack([xs[:, None, :].expand(k, n, n), ys[:, :, None].expand(k, n, n)], dim=-1)
    sampled = F.grid_sample(feat[rois[:, 0].long()], grid, mode="bilinear",
                            padding_mode="border", align_corners=False)
    return F.avg_pool2d(sampled, sampling_ratio) if sampling_ratio > 1 else sampled


def _group_sample(groups: torch.Tensor, labels: torch.Tensor, n_groups: int, n_total: int,
                  pos_fraction: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Random positive/negative subsample within each group, all groups at once.

    ``labels`` is 1 (positive), 0 (negative) or -1 (ignore). Each group keeps
    up to ``n_total * pos_fraction`` positives and fills the rest of
    ``n_total`` with negatives. Returns boolean masks (pos, neg).
    """
    def ranks(mask):
        key = groups.to(torch.float64) + torch.rand(groups.shape, dtype=torch.float64)
        key = torch.where(mask, key, torch.full_like(key, math.inf))
        order = torch.argsort(key)
        count = torch.bincount(groups[mask], minlength=n_groups)
        starts = torch.cumsum(count, 0) - count
        rank = torch.empty_like(order)
        rank[order] = torch.arange(len(order)) - starts[groups[order]]
        return rank, count

    pos, neg = labels == 1, labels == 0
    rank_p, cnt_p = ranks(pos)
    n_pos = cnt_p.clamp(max=int(n_total * pos_fraction))
    rank_n, cnt_n = ranks(neg)
    n_neg = torch.minimum(cnt_n, n_total - n_pos)
    return pos & (rank_p < n_pos[groups]), neg & (rank_n < n_neg[groups])


def pairwise_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """IoU of a[i] with b[i]."""
    lt = torch.maximum(a[:, :2], b[:, :2])
    rb = torch.minimum(a[:, 2:], b[:, 2:])
    inter = (rb - lt).clamp(min=0).prod(1)
    area = lambda x: (x[:, 2] - x[:, 0]) * (x[:, 3] - x[:, 1])
    return inter / (area(a) + area(b) - inter)


class HybridDetector(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.body, self.fpn = build_backbone(c)
        n_anchor = len(c.anchor_ratios)
        self.rpn_conv = nn.Conv2d(c.fpn_channels, c.fpn_channels, 3, 1, 1)
        self.rpn_obj = nn.Conv2d(c.fpn_channels, n_anchor, 1)
        self.rpn_box = nn.Conv2d(c.fpn_channels, 4 * n_anchor, 1)
        self.roi_in = c.roi_size * c.roi_size * c.fpn_channels
        self.box_head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(self.roi_in, c.roi_hidden), nn.ReLU(),
            nn.Linear(c.roi_hidden, c.roi_hidden), nn.ReLU(),
        )
        self.box_reg = nn.Linear(c.roi_hidden, 4)
        self.classifier = FusionClassifier(c.roi_hidden, c.fusion_mode, c.fusion_hidden, c.num_classes)
        self.mask_head = nn.Sequential(
            nn.Conv2d(c.fpn_channels, c.fpn_channels, 3, 1, 1), nn.ReLU(),
            nn.Conv2d(c.fpn_channels, 1, 1),
        )
        for m in (self.rpn_obj, self.rpn_box, self.box_reg):
            nn.init.normal_(m.weight, std=0.01)
            nn.init.zeros_(m.bias)
        self._anchor_cache: dict = {}

    # -- parameter groups for two-stage training
    def backbone_modules(self) -> list[nn.Module]:
        return [self.body]

    def backbone_parameters(self):
        return list(self.body.parameters())

    def head_parameters(self):
        ids = {id(p) for p in self.backbone_parameters()}
        return [p for p in self.parameters() if id(p) not in ids]

    # -- anchors
    def anchors(self, feats, device) -> torch.Tensor:
        key = tuple(f.shape[-2:] for f in feats)
        if key not in self._anchor_cache:
            out = []
            ratios = torch.tensor(self.config.anchor_ratios)
            for f, stride, size in zip(feats, self.config.fpn_strides, self.config.anchor_sizes):
                h, w = f.shape[-2:]
                ws = size / torch.sqrt(ratios)
                hs = size * torch.sqrt(ratios)
                base = torch.stack([-ws, -hs, ws, hs], dim=1) / 2
                ys = (torch.arange(h) + 0.5) * stride
                xs = (torch.arange(w) + 0.5) * stride
                cy, cx = torch.meshgrid(ys, xs, indexing="ij")
                shifts = torch.stack([cx, cy, cx, cy], dim=-1).reshape(-1, 1, 4)
                out.append((shifts + base.reshape(1, -1, 4)).reshape(-1, 4))
            self._anchor_cache[key] = torch.cat(out)
        return self._anchor_cache[key].to(device)

    def _rpn(self, feats):
        logits, deltas = [], []
        b = feats[0].shape[0]
        for f in feats:
            t = F.relu(self.rpn_conv(f))
            logits.append(self.rpn_obj(t).permute(0, 2, 3, 1).reshape(b, -1))
            deltas.append(self.rpn_box(t).permute(0, 2, 3, 1).reshape(b, -1, 4))
        return torch.cat(logits, 1), torch.cat(deltas, 1)

    def _proposals(self, anchors, logits, deltas, image_size, pre_n, post_n) -> torch.Tensor:
        """Top-scoring decoded anchors after NMS, as (K, 5) rows (image index first)."""
        b = logits.shape[0]
        k = min(pre_n, logits.shape[1])
        scores, top = torch.topk(logits, k, dim=1)
        boxes = decode(anchors[top.flatten()], deltas.gather(1, top[..., None].expand(b, k, 4)).reshape(-1, 4),
                       RPN_WEIGHTS)
        boxes = clip_boxes_to_image(boxes, image_size)
        img = torch.arange(b).repeat_interleave(k)
        scores = scores.flatten()
        keep = remove_small_boxes(boxes, 1.0)
        keep = keep[batched_nms(boxes[keep], scores[keep], img[keep], self.config.rpn_nms_iou)]
        # batched_nms sorts by score overall; keep the first post_n per image
        img_k = img[keep]
        order = torch.argsort(img_k, stable=True)
        count = torch.bincount(img_k, minlength=b)
        rank = torch.empty_like(order)
        rank[order] = torch.arange(len(order)) - (torch.cumsum(count, 0) - count)[img_k[order]]
        keep = keep[rank < post_n]
        return torch.cat([img[keep, None].to(boxes.dtype), boxes[keep]], 1)

    def _level_of(self, boxes: torch.Tensor) -> torch.Tensor:
        scale = torch.sqrt(((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])).clamp(min=1e-6))
        sizes = torch.tensor(self.config.anchor_sizes, device=boxes.device)
        return torch.argmin((torch.log(scale)[:, None] - torch.log(sizes)[None]).abs(), dim=1)

    def _pool(self, feats, rois: torch.Tensor, size: int) -> torch.Tensor:
        """Multi-level ROI align; ``rois`` is (K, 5) with the batch index first."""
        out = rois.new_zeros((rois.shape[0], feats[0].shape[1], size, size))
        levels = self._level_of(rois[:, 1:])
        for lvl, (f, stride) in enumerate(zip(feats, self.config.fpn_strides)):
            idx = torch.nonzero(levels == lvl).flatten()
            if len(idx):
                out[idx] = grid_roi_align(f, rois[idx], size, stride, self.config.sampling_ratio)
        return out

    def _heads(self, feats, rois, priors):
        pooled = self._pool(feats, rois, self.config.roi_size)
        vec = self.box_head(pooled)
        packed = None if priors is None else priors[rois[:, 0].long()]
        return self.classifier(vec, packed), self.box_reg(vec)

    def features(self, images):
        if images.dim() != 4 or images.shape[1] != self.config.input_channels:
            raise ValueError(f"expected (B, {self.config.input_channels}, H, W) input, "
                             f"got {tuple(images.shape)}")
        return self.fpn(self.body(images))

    def forward(self, images: torch.Tensor, priors: torch.Tensor | None = None, targets=None):
        """Training mode (targets given): LossBundle. Eval mode: detections per image.

        ``priors`` is the packed (B, 10) prior tensor; ``targets`` holds
        ``boxes`` (B, 4), ``labels`` (B,) in {1, 2} and ``masks`` (B, H, W).
        """
        feats = self.features(images)
        if targets is not None:
            return self._loss(images, feats, priors, targets)
        return self._detect(images, feats, priors)

    def _loss(self, images, feats, priors, targets) -> LossBundle:
        c = self.config
        b = images.shape[0]
        size = images.shape[-2:]
        gt = targets["boxes"].to(images.dtype)
        anchors = self.anchors(feats, images.device)
        logits, deltas = self._rpn(feats)

        iou = box_iou(gt, anchors)  # (B, N)
        labels = torch.full_like(iou, -1.0)
        labels[iou < c.rpn_bg_iou] = 0
        labels[iou >= c.rpn_fg_iou] = 1
        best = iou.max(dim=1, keepdim=True).values
        labels[(iou == best) & (best > 0)] = 1
        n = anchors.shape[0]
        groups = torch.arange(b).repeat_interleave(n)
        pos, neg = _group_sample(groups, labels.flatten(), b, c.rpn_batch_per_image, 0.5)
        sel = pos | neg
        a_img, a_idx = groups[pos], torch.nonzero(pos).flatten() % n
        rpn_logits = logits.flatten()[sel]
        rpn_labels = labels.flatten()[sel]
        rpn_pred = deltas.reshape(-1, 4)[pos]
        rpn_tgt = encode(anchors[a_idx], gt[a_img], RPN_WEIGHTS)

        with torch.no_grad():
            props = self._proposals(anchors, logits.detach(), deltas.detach(), size,
                                    c.rpn_pre_nms_train, c.rpn_post_nms_train)
        # the ground-truth box always joins the candidate pool
        cand = torch.cat([props, torch.cat([torch.arange(b, dtype=gt.dtype)[:, None], gt], 1)])
        c_img = cand[:, 0].long()
        ov = pairwise_iou(cand[:, 1:], gt[c_img])
        lab = (ov >= c.roi_fg_iou).to(torch.long)
        pos, neg = _group_sample(c_img, lab, b, c.roi_batch_per_image, c.roi_positive_fraction)
        rois = cand[pos | neg]
        is_pos = pos[pos | neg]
        r_img = rois[:, 0].long()
        cls_labels = torch.where(is_pos, targets["labels"].to(torch.long)[r_img], 0)
        box_tgt = encode(rois[is_pos, 1:], gt[r_img[is_pos]], HEAD_WEIGHTS)
        cls_logits, box_deltas = self._heads(feats, rois, priors)

        pos_rois = rois[is_pos]
        mask_logits = self.mask_head(self._pool(feats, pos_rois, c.mask_roi_size)).squeeze(1)
        with torch.no_grad():
            m = targets["masks"].to(images.dtype).unsqueeze(1)
            mask_tgt = roi_align(m, pos_rois, c.mask_roi_size, 1.0, 2, aligned=True).squeeze(1)
            mask_tgt = (mask_tgt >= 0.5).to(images.dtype)

        outputs = {"rpn_logits": rpn_logits, "rpn_deltas": rpn_pred, "cls_logits": cls_logits,
                   "box_deltas": box_deltas[is_pos], "mask_logits": mask_logits}
        tgts = {"rpn_labels": rpn_labels, "rpn_deltas": rpn_tgt, "cls_labels": cls_labels,
                "box_deltas": box_tgt, "mask": mask_tgt}
        return multitask_loss(outputs, tgts, c)

    @torch.no_grad()
    def _detect(self, images, feats, priors) -> list[list[Detection]]:
        c = self.config
        b = images.shape[0]
        size = images.shape[-2:]
        anchors = self.anchors(feats, images.device)
        logits, deltas = self._rpn(feats)
        rois = self._proposals(anchors, logits, deltas, size, c.rpn_pre_nms_test, c.rpn_post_nms_test)
        results: list[list[Detection]] = [[] for _ in range(b)]
        if len(rois) == 0:
            return results
        cls_logits, box_deltas = self._heads(feats, rois, priors)
        if not (torch.isfinite(cls_logits).all() and torch.isfinite(box_deltas).all()):
            raise NumericError("non-finite activations in detector heads")
        probs = torch.softmax(cls_logits.double(), dim=1)
        boxes = clip_boxes_to_image(decode(rois[:, 1:], box_deltas, HEAD_WEIGHTS), size)
        score = 1.0 - probs[:, 0]
        keep_all = []
        for i in range(b):
            sel = torch.nonzero((rois[:, 0] == i) & (score >= c.score_threshold)).flatten()
            if len(sel) == 0:
                continue
            sel = sel[remove_small_boxes(boxes[sel], 0.5)]
            k = nms(boxes[sel], score[sel].float(), c.detection_nms_iou)[:c.detections_per_image]
            keep_all.append(sel[k])
        if not keep_all:
            return results
        keep = torch.cat(keep_all)
        kept_rois = torch.cat([rois[keep, :1], boxes[keep]], 1)
        masks = torch.sigmoid(self.mask_head(self._pool(feats, kept_rois, c.mask_roi_size))).squeeze(1)
        for j, r in enumerate(keep.tolist()):
            x1, y1, x2, y2 = boxes[r].tolist()
            results[int(rois[r, 0])].append(
                Detection((y1, x1, y2, x2), probs[r].numpy(), masks[j].numpy()))
        for dets in results:
            dets.sort(key=lambda d: -d.score)
        return results


def build_model(config: ModelConfig, seed: int = 0) -> HybridDetector:
    """Construct the detector with parameters initialised deterministically from ``seed``."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = HybridDetector(config)
    return model
