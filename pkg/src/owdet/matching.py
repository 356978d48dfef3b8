"""Proposal-to-ground-truth matching and pseudo-unknown selection."""

from dataclasses import dataclass

import numpy as np

from .head import BACKGROUND, PSEUDO_UNKNOWN


@dataclass(frozen=True)
class PseudoConfig:
    tau: int = 20
    size_ratio: float = 0.5
    logit_floor: float = 0.0
    iou_match_threshold: float = 0.5

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if not 0 < self.size_ratio <= 1:
            raise ValueError("size_ratio must lie in (0, 1]")
        if not 0 < self.iou_match_threshold < 1:
            raise ValueError("iou_match_threshold must lie in (0, 1)")


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between ``n x 4`` and ``m x 4`` box arrays."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64)).reshape(-1, 4)
    b = np.atleast_2d(np.asarray(b, dtype=np.float64)).reshape(-1, 4)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou(a, b) -> float:
    return float(iou_matrix(a, b)[0, 0])


def match_gt(boxes, gt_boxes, gt_classes, threshold: float = 0.5):
    """Greedy one-to-one matching in descending IoU order.

    Returns ``(labels, gt_index)``: matched proposals carry their GT class and
    the index of the GT box; everything else is ``BACKGROUND`` with index -1.
    Ties are broken by lower proposal index, then lower GT index.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    labels = np.full(n, BACKGROUND, dtype=np.int64)
    gt_index = np.full(n, -1, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if n == 0 or len(gt_boxes) == 0:
        return labels, gt_index
    ious = iou_matrix(boxes, gt_boxes)
    pi, gi = np.nonzero(ious >= threshold)
    order = np.lexsort((gi, pi, -ious[pi, gi]))
    used_gt = set()
    for k in order:
        p, g = pi[k], gi[k]
        if gt_index[p] >= 0 or g in used_gt:
            continue
        gt_index[p] = g
        labels[p] = gt_classes[g]
        used_gt.add(g)
    return labels, gt_index


def pseudo_count(k_gt: int, n_known: int, tau: int = 20) -> int:
    """Dynamic pseudo-label budget ``floor(k_gt * max(1, 2 tau / n_known))``."""
    if n_known < 1:
        raise ValueError("n_known must be >= 1")
    return int(np.floor(k_gt * max(1.0, 2.0 * tau / n_known) + 1e-9))


def select_pseudo_unknowns(labels, boxes, calibrated_logits, k_gt: int, n_known: int,
                           config: PseudoConfig = PseudoConfig(),
                           image_extent=(1.0, 1.0)) -> np.ndarray:
    """Promote the best unmatched proposals to pseudo-unknowns.

    Background proposals survive when their shorter box side is at least
    ``size_ratio * min(W, H)`` and their calibrated unknown logit exceeds
    ``logit_floor``. The top ``pseudo_count`` survivors by logit are kept.
    """
    labels = np.array(labels, dtype=np.int64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    z = np.asarray(calibrated_logits, dtype=np.float64)
    side = np.minimum(boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1])
    ok = ((labels == BACKGROUND)
          & (side >= config.size_ratio * min(image_extent))
          & (z > config.logit_floor))
    cand = np.flatnonzero(ok)
    budget = pseudo_count(k_gt, n_known, config.tau)
    if cand.size and budget:
        order = cand[np.lexsort((cand, -z[cand]))]
        labels[order[:budget]] = PSEUDO_UNKNOWN
    return labels
