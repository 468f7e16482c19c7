"""Boxes, anchors and anchor assignment.

Boxes are ``(x1, y1, x2, y2)`` in grid-cell units, x along columns and y
along rows.  Anchors sit at every cell center with one square anchor per
scale, indexed row-major and then by anchor slot.
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import InputError

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


def _as_boxes(boxes):
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return b


def _check_valid(boxes, what="box"):
    b = _as_boxes(boxes)
    if not np.all(np.isfinite(b)):
        raise InputError(f"{what} coordinates must be finite")
    if np.any(b[:, 2] <= b[:, 0]) or np.any(b[:, 3] <= b[:, 1]):
        raise InputError(f"degenerate {what}: need x1 < x2 and y1 < y2")
    return b


def iou_matrix(a, b):
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` box arrays."""
    a = _as_boxes(a)
    b = _as_boxes(b)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def iou(a, b) -> float:
    """IoU of two boxes; raises :class:`InputError` on a degenerate box."""
    a = _check_valid(a)
    b = _check_valid(b)
    return float(iou_matrix(a, b)[0, 0])


@dataclass(frozen=True)
class AnchorSet:
    height: int
    width: int
    scales: tuple

    @property
    def num_slots(self) -> int:
        return len(self.scales)

    def __len__(self):
        return self.height * self.width * len(self.scales)

    @property
    def centers(self):
        ys, xs = np.meshgrid(np.arange(self.height) + 0.5, np.arange(self.width) + 0.5, indexing="ij")
        c = np.stack([xs.ravel(), ys.ravel()], axis=1)
        return np.repeat(c, self.num_slots, axis=0)

    @property
    def sizes(self):
        return np.tile(np.asarray(self.scales, dtype=np.float64), self.height * self.width)

    @property
    def boxes(self):
        c = self.centers
        half = self.sizes[:, None] / 2.0
        return np.concatenate([c - half, c + half], axis=1)


def make_anchors(height: int, width: int, scales: Sequence[float]) -> AnchorSet:
    if height < 1 or width < 1 or not scales:
        raise InputError("anchor grid needs positive dimensions and at least one scale")
    if any(s <= 0 for s in scales):
        raise InputError("anchor scales must be positive")
    return AnchorSet(int(height), int(width), tuple(float(s) for s in scales))


@dataclass
class AssignmentMap:
    """Per-anchor status (``POSITIVE``, ``NEGATIVE``, ``IGNORE``), matched
    ground-truth index and class id (-1 where not positive)."""

    status: np.ndarray
    gt_index: np.ndarray
    class_id: np.ndarray

    @property
    def positive(self):
        return self.status == POSITIVE

    @property
    def num_positive(self) -> int:
        return int(np.count_nonzero(self.status == POSITIVE))


def assign_anchors(anchors, gt_boxes, gt_classes, t_pos=0.5, t_neg=0.4) -> AssignmentMap:
    """Max-IoU assignment with best-anchor forcing.

    ``anchors`` is an :class:`AnchorSet` or an ``(n, 4)`` array.  Every
    ground truth that overlaps some anchor gets at least one positive:
    its best anchor (lowest index on ties) that no earlier ground truth
    has already claimed.
    """
    if not 0 <= t_neg <= t_pos <= 1:
        raise InputError("need 0 <= t_neg <= t_pos <= 1")
    a = anchors.boxes if isinstance(anchors, AnchorSet) else _as_boxes(anchors)
    n = len(a)
    gt = _as_boxes(gt_boxes)
    classes = np.asarray(gt_classes, dtype=np.int64).ravel()
    status = np.full(n, NEGATIVE, dtype=np.int8)
    gt_index = np.full(n, -1, dtype=np.int64)
    if len(gt) == 0:
        return AssignmentMap(status, gt_index, np.full(n, -1, dtype=np.int64))

    overlaps = iou_matrix(a, gt)
    best_gt = np.argmax(overlaps, axis=1)
    best_iou = overlaps[np.arange(n), best_gt]
    status[best_iou >= t_neg] = IGNORE
    pos = best_iou >= t_pos
    status[pos] = POSITIVE
    gt_index[pos] = best_gt[pos]

    claimed = np.zeros(n, dtype=bool)
    for g in range(len(gt)):
        col = np.where(claimed, -1.0, overlaps[:, g])
        k = int(np.argmax(col))
        if col[k] <= 0:
            continue
        claimed[k] = True
        status[k] = POSITIVE
        gt_index[k] = g

    class_id = np.where(gt_index >= 0, classes[np.maximum(gt_index, 0)], -1)
    return AssignmentMap(status, gt_index, class_id)


def _center_size(boxes):
    b = _as_boxes(boxes)
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    return b[:, 0] + 0.5 * w, b[:, 1] + 0.5 * h, w, h


def encode_boxes(anchors, gts):
    """Center-offset / log-size deltas of ``gts`` relative to ``anchors``."""
    ax, ay, aw, ah = _center_size(anchors)
    gx, gy, gw, gh = _center_size(gts)
    if np.any(aw <= 0) or np.any(ah <= 0) or np.any(gw <= 0) or np.any(gh <= 0):
        raise InputError("boxes must have positive size")
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_boxes(anchors, deltas):
    ax, ay, aw, ah = _center_size(anchors)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise InputError("anchors must have positive size")
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    cx = ax + d[:, 0] * aw
    cy = ay + d[:, 1] * ah
    w = aw * np.exp(d[:, 2])
    h = ah * np.exp(d[:, 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode_box(anchor, gt):
    return tuple(float(v) for v in encode_boxes(anchor, gt)[0])


def decode_box(anchor, delta):
    return tuple(float(v) for v in decode_boxes(anchor, delta)[0])
