"""Training and pseudo-label generation.

Gaussian regression targets, Bernoulli classification assignment (plain IoU
thresholds and ATSS), and the online pseudo-labels fed to the support set.
Label maps are ``(H, W, A)`` arrays; ``-1`` marks ignored cells.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .geometry import AnchorGrid, Box, iou_to_one

IGNORE = -1.0


@dataclass(frozen=True)
class LabelConfig:
    gaussian_sigma: float | None = None  # cells; None -> derived from target size
    iou_pos_thresh: float = 0.8
    iou_neg_thresh: float = 0.3
    atss_topk_5s: int = 15
    atss_topk_1s: int = 11
    atss_variant: Literal["MinL2", "MaxIoU"] = "MaxIoU"

    def __post_init__(self):
        if not 0.0 <= self.iou_neg_thresh < self.iou_pos_thresh <= 1.0:
            raise ValueError("need 0 <= iou_neg_thresh < iou_pos_thresh <= 1")
        if self.atss_topk_5s < 1 or self.atss_topk_1s < 1:
            raise ValueError("ATSS top-k must be >= 1")
        if self.gaussian_sigma is not None and not self.gaussian_sigma > 0:
            raise ValueError("gaussian_sigma must be positive")
        if self.atss_variant not in ("MinL2", "MaxIoU"):
            raise ValueError(f"unknown ATSS variant {self.atss_variant!r}")

    def sigma_for(self, box: Box, stride: float) -> float:
        if self.gaussian_sigma is not None:
            return self.gaussian_sigma
        return default_sigma(box, stride)

    def topk_for(self, num_anchors: int) -> int:
        return self.atss_topk_1s if num_anchors == 1 else self.atss_topk_5s


def default_sigma(box: Box, stride: float) -> float:
    """An eighth of the short side in cells, never below one cell."""
    return max(1.0, min(box.w, box.h) / stride / 8.0)


def gaussian_label(grid_h: int, grid_w: int, center, sigma: float) -> np.ndarray:
    """Gaussian target ``exp(-d^2 / 2 sigma^2)``; ``center`` is ``(row, col)`` in grid units."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    cy, cx = center
    di = (np.arange(grid_h) - cy) ** 2
    dj = (np.arange(grid_w) - cx) ** 2
    g = np.exp(-(di[:, None] + dj[None, :]) / (2.0 * sigma * sigma))
    return g[:, :, None]


def online_pseudo_label(grid_h: int, grid_w: int, predicted_center, sigma: float) -> np.ndarray:
    """Pseudo-label for a support-set entry, centered on the tracker's own estimate."""
    return gaussian_label(grid_h, grid_w, predicted_center, sigma)


def bernoulli_from_iou(ious: np.ndarray, pos_thresh: float, neg_thresh: float) -> np.ndarray:
    ious = np.asarray(ious, dtype=float)
    labels = np.full(ious.shape, IGNORE)
    labels[ious < neg_thresh] = 0.0
    labels[ious > pos_thresh] = 1.0
    labels.reshape(-1)[int(np.argmax(ious))] = 1.0
    return labels


def assign_bernoulli_iou(anchors: AnchorGrid, gt: Box, cfg: LabelConfig = LabelConfig()) -> np.ndarray:
    """1 above the positive threshold (plus the best anchor), 0 below the negative one, -1 between."""
    ious = iou_to_one(anchors.boxes(), gt)
    return bernoulli_from_iou(ious, cfg.iou_pos_thresh, cfg.iou_neg_thresh)


@dataclass(frozen=True)
class AtssSelection:
    labels: np.ndarray
    threshold: float
    candidates: np.ndarray  # flat indices, in selection order


def atss_select(ious, center_dist, inside, topk: int, variant: str) -> AtssSelection:
    """ATSS on flat per-anchor statistics.

    Candidates are the ``topk`` anchors with the highest IoU (``MaxIoU``) or
    the smallest center distance (``MinL2``); ties keep the lower index. The
    threshold is mean plus population standard deviation of candidate IoUs.
    """
    ious = np.asarray(ious, dtype=float).reshape(-1)
    n = ious.size
    if not 1 <= topk <= n:
        raise ValueError(f"topk={topk} must be within [1, {n}]")
    if variant == "MaxIoU":
        order = np.argsort(-ious, kind="stable")
    elif variant == "MinL2":
        order = np.argsort(np.asarray(center_dist, dtype=float).reshape(-1), kind="stable")
    else:
        raise ValueError(f"unknown ATSS variant {variant!r}")
    cand = order[:topk]
    cand_iou = ious[cand]
    # correctly rounded sums keep the threshold independent of candidate order
    mean = math.fsum(cand_iou) / topk
    threshold = mean + math.sqrt(math.fsum((cand_iou - mean) ** 2) / topk)
    labels = np.zeros(n)
    inside = np.asarray(inside, dtype=bool).reshape(-1)
    pos = cand[(cand_iou >= threshold) & inside[cand]]
    labels[pos] = 1.0
    if pos.size == 0:
        labels[int(np.argmax(ious))] = 1.0
    return AtssSelection(labels, threshold, cand)


def assign_atss(anchors: AnchorGrid, gt: Box, topk: int, variant: str = "MaxIoU") -> np.ndarray:
    sel = atss_for_grid(anchors, gt, topk, variant)
    return sel.labels.reshape(anchors.height, anchors.width, anchors.num_anchors)


def atss_for_grid(anchors: AnchorGrid, gt: Box, topk: int, variant: str = "MaxIoU") -> AtssSelection:
    boxes = anchors.boxes()
    ious = iou_to_one(boxes, gt)
    dist = np.hypot(boxes[..., 0] - gt.cx, boxes[..., 1] - gt.cy)
    x0, y0, x1, y1 = gt.to_xyxy()
    inside = ((boxes[..., 0] > x0) & (boxes[..., 0] < x1)
              & (boxes[..., 1] > y0) & (boxes[..., 1] < y1))
    return atss_select(ious, dist, inside, topk, variant)
