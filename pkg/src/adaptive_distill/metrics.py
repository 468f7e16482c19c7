"""COCO-style detection evaluation and report files.

AP is 101-point interpolated and averaged over IoU thresholds
0.50:0.05:0.95 and over classes that have ground truth.  Classes without
ground truth are reported as ``None`` rather than 0.
"""

import csv
import json
import os
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional

import numpy as np

from .boxes import iou_matrix

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class MatchResult:
    """Matching of one image's detections at one IoU threshold.

    ``order`` is the processing order (descending score, lower index first
    on ties); ``tp`` is indexed like the input detections.
    """

    order: np.ndarray
    tp: np.ndarray
    gt_matched: np.ndarray


def score_order(scores):
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def match_detections(det_boxes, det_scores, det_classes, gt_boxes, gt_classes, iou_thresh=0.5,
                     overlaps=None) -> MatchResult:
    """Greedy per-class matching by descending score.

    Each detection takes the unmatched ground truth of its class with the
    highest IoU, provided that IoU reaches ``iou_thresh``.
    """
    det_classes = np.asarray(det_classes)
    gt_classes = np.asarray(gt_classes)
    n_det, n_gt = len(det_classes), len(gt_classes)
    order = score_order(det_scores)
    tp = np.zeros(n_det, dtype=bool)
    matched = np.zeros(n_gt, dtype=bool)
    if n_det == 0 or n_gt == 0:
        return MatchResult(order, tp, matched)
    if overlaps is None:
        overlaps = iou_matrix(det_boxes, gt_boxes)
    same = det_classes[:, None] == gt_classes[None, :]
    for i in order:
        cand = np.where(same[i] & ~matched, overlaps[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= iou_thresh:
            matched[j] = True
            tp[i] = True
    return MatchResult(order, tp, matched)


def interpolated_precision(tp_sorted, n_gt):
    """Precision at the 101 COCO recall points for score-sorted TP flags."""
    if n_gt == 0:
        return None
    tp_sorted = np.asarray(tp_sorted, dtype=bool)
    if tp_sorted.size == 0:
        return np.zeros(RECALL_POINTS.size)
    tps = np.cumsum(tp_sorted)
    fps = np.cumsum(~tp_sorted)
    recall = tps / n_gt
    precision = tps / (tps + fps)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    out = np.zeros(RECALL_POINTS.size)
    hit = idx < recall.size
    out[hit] = envelope[idx[hit]]
    return out


def average_precision(tp_sorted, n_gt) -> Optional[float]:
    """101-point interpolated AP; ``None`` when there is no ground truth."""
    p = interpolated_precision(tp_sorted, n_gt)
    return None if p is None else float(np.mean(p))


@dataclass
class EvalReport:
    ap: Optional[float]
    ap50: Optional[float]
    ap75: Optional[float]
    per_class_ap: Dict[str, Optional[float]] = field(default_factory=dict)
    pr_curves: Dict[str, Dict[str, List[float]]] = field(default_factory=dict)
    metadata: Dict[str, object] = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _mean_or_none(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def evaluate(detections, gt_boxes, gt_classes, num_classes, metadata=None) -> EvalReport:
    """Evaluate per-image detections against per-image ground truth.

    ``detections`` is a list (one entry per image) of objects with
    ``boxes``, ``scores`` and ``classes`` arrays.  Detections of all images
    are pooled per class in descending score; ties keep image order and
    then within-image order.
    """
    n_thr = len(IOU_THRESHOLDS)
    per_class = {c: [[] for _ in range(n_thr)] for c in range(num_classes)}
    scores = {c: [] for c in range(num_classes)}
    n_gt = np.zeros(num_classes, dtype=np.int64)

    for dets, gb, gc in zip(detections, gt_boxes, gt_classes):
        gc = np.asarray(gc, dtype=np.int64)
        n_gt += np.bincount(gc, minlength=num_classes)[:num_classes]
        overlaps = iou_matrix(dets.boxes, gb) if len(dets) and len(gc) else None
        matches = [match_detections(dets.boxes, dets.scores, dets.classes, gb, gc, t, overlaps)
                   for t in IOU_THRESHOLDS]
        order = matches[0].order
        for c in range(num_classes):
            sel = order[dets.classes[order] == c]
            scores[c].append(dets.scores[sel])
            for k, m in enumerate(matches):
                per_class[c][k].append(m.tp[sel])

    ap_table = np.full((num_classes, n_thr), np.nan)
    pr_curves = {}
    for c in range(num_classes):
        if n_gt[c] == 0:
            continue
        s = np.concatenate(scores[c]) if scores[c] else np.zeros(0)
        rank = score_order(s)
        for k in range(n_thr):
            tp = np.concatenate(per_class[c][k]) if per_class[c][k] else np.zeros(0, dtype=bool)
            ap_table[c, k] = average_precision(tp[rank], int(n_gt[c]))
            if k == 0:
                pr_curves[str(c)] = {"recall": RECALL_POINTS.tolist(),
                                     "precision": interpolated_precision(tp[rank], int(n_gt[c])).tolist()}

    has_gt = n_gt > 0
    if not has_gt.any():
        return EvalReport(None, None, None, {str(c): None for c in range(num_classes)}, {},
                          dict(metadata or {}))
    per_class_ap = {str(c): (float(np.mean(ap_table[c])) if has_gt[c] else None) for c in range(num_classes)}
    ap = float(np.mean(ap_table[has_gt]))
    ap50 = float(np.mean(ap_table[has_gt, 0]))
    ap75 = float(np.mean(ap_table[has_gt, 5]))
    return EvalReport(ap, ap50, ap75, per_class_ap, pr_curves, dict(metadata or {}))


# ---------------------------------------------------------------------------
# report files


def write_report(path, report: EvalReport):
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report(path) -> EvalReport:
    with open(path) as fh:
        return EvalReport.from_dict(json.load(fh))


def write_loss_csv(path, loss_log):
    """``loss_log`` is a list of dicts sharing the same keys."""
    fields = ["iteration", "lr", "total", "focal", "loc", "distill"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in loss_log:
            writer.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in fields})


def write_sweep_csv(path, rows, key="rho"):
    """One row per swept value with per-seed APs and their mean."""
    seeds = sorted({s for r in rows for s in r["ap_by_seed"]})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([key] + [f"ap_seed{s}" for s in seeds] + ["ap_mean"])
        for r in rows:
            writer.writerow([r[key]] + [repr(r["ap_by_seed"].get(s)) for s in seeds] + [repr(r["ap_mean"])])


def emit_report(directory, report: EvalReport, loss_log=None, sweep=None):
    """Write ``report.json`` and, when given, ``loss.csv`` / ``rho_sweep.csv``."""
    os.makedirs(directory, exist_ok=True)
    paths = {"report": os.path.join(directory, "report.json")}
    write_report(paths["report"], report)
    if loss_log is not None:
        paths["loss"] = os.path.join(directory, "loss.csv")
        write_loss_csv(paths["loss"], loss_log)
    if sweep is not None:
        paths["sweep"] = os.path.join(directory, "rho_sweep.csv")
        write_sweep_csv(paths["sweep"], sweep)
    return paths
