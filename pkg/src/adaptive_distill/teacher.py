"""Teacher inference: decoding, NMS, threshold calibration and targets.

Soft targets are the teacher's per-anchor, per-class probabilities taken
before any suppression.  Hard targets are decoded boxes that survive the
score floor, NMS and the calibrated threshold.
"""

import json
import logging
import os
from dataclasses import dataclass, asdict
from typing import List

import numpy as np
from scipy.special import expit

from .boxes import decode_boxes, iou_matrix
from .exceptions import InputError

logger = logging.getLogger(__name__)

RECORDS_FORMAT = "adaptive-distill/targets"
RECORDS_VERSION = 1
SOFT_BLOB = "soft_targets.f32"


@dataclass(frozen=True)
class Detection:
    class_id: int
    box: tuple
    score: float


@dataclass
class DetectionArrays:
    """Column-wise detections of one image."""

    boxes: np.ndarray
    scores: np.ndarray
    classes: np.ndarray

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))

    @classmethod
    def from_list(cls, dets):
        if not dets:
            return cls.empty()
        return cls(np.array([d.box for d in dets], dtype=np.float64),
                   np.array([d.score for d in dets], dtype=np.float64),
                   np.array([d.class_id for d in dets], dtype=np.int64))

    def to_list(self) -> List[Detection]:
        return [Detection(int(c), tuple(float(v) for v in b), float(s))
                for b, s, c in zip(self.boxes, self.scores, self.classes)]

    def take(self, idx):
        return DetectionArrays(self.boxes[idx], self.scores[idx], self.classes[idx])

    def __len__(self):
        return len(self.scores)


@dataclass(frozen=True)
class InferenceConfig:
    score_floor: float = 0.05
    pre_nms_top_k: int = 1000
    nms_iou: float = 0.5
    max_detections: int = 100


@dataclass
class TargetRecord:
    scene_id: str
    hard_targets: List[Detection]
    soft_targets: np.ndarray


@dataclass
class CalibrationResult:
    threshold: float
    avg_instances_labeled: float
    avg_instances_unlabeled_at_threshold: float
    within_tolerance: bool = True
    boundary: bool = False


def soft_target_map(model, grid):
    """Teacher probabilities for every anchor-class pair, stored as float32."""
    logits = model.forward(grid)[:, :model.num_classes]
    if not np.all(np.isfinite(logits)):
        raise InputError("teacher produced non-finite logits")
    return expit(logits).astype(np.float32)


def _canonical_order(dets: DetectionArrays):
    b = dets.boxes
    return np.lexsort((b[:, 3], b[:, 2], b[:, 1], b[:, 0], dets.classes, -dets.scores))


def nms_arrays(dets: DetectionArrays, iou_thresh=0.5) -> DetectionArrays:
    """Greedy class-wise suppression; output sorted by descending score."""
    if not np.all(np.isfinite(dets.scores)):
        raise InputError("detection scores must be finite")
    if len(dets) == 0:
        return dets
    dets = dets.take(_canonical_order(dets))
    keep = []
    for c in np.unique(dets.classes):
        idx = np.flatnonzero(dets.classes == c)
        boxes = dets.boxes[idx]
        alive = np.ones(len(idx), dtype=bool)
        overlaps = iou_matrix(boxes, boxes)
        for i in range(len(idx)):
            if not alive[i]:
                continue
            keep.append(idx[i])
            alive[i + 1:] &= overlaps[i, i + 1:] <= iou_thresh
    return dets.take(np.sort(np.asarray(keep)))


def nms(dets: List[Detection], iou_thresh=0.5) -> List[Detection]:
    return nms_arrays(DetectionArrays.from_list(dets), iou_thresh).to_list()


def predict(model, anchors, grid, config: InferenceConfig = InferenceConfig()):
    """Pre-NMS detections above the score floor (top-k by score) plus the
    full soft map, which is taken before any suppression."""
    out = model.forward(grid)
    if not np.all(np.isfinite(out)):
        raise InputError("model produced non-finite outputs")
    c = model.num_classes
    soft = expit(out[:, :c]).astype(np.float32)
    scores = expit(out[:, :c])
    anchor_idx, cls = np.nonzero(scores >= config.score_floor)
    flat = scores[anchor_idx, cls]
    order = np.argsort(-flat, kind="stable")[:config.pre_nms_top_k]
    anchor_idx, cls, flat = anchor_idx[order], cls[order], flat[order]
    boxes = decode_boxes(anchors.boxes[anchor_idx], out[anchor_idx, c:])
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0.0, anchors.width)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0.0, anchors.height)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    dets = DetectionArrays(boxes[valid], flat[valid], cls[valid].astype(np.int64))
    return dets, soft


def detect(model, anchors, grid, config: InferenceConfig = InferenceConfig()):
    """Post-NMS detections (capped at ``max_detections``) and the soft map."""
    dets, soft = predict(model, anchors, grid, config)
    kept = nms_arrays(dets, config.nms_iou)
    return kept.take(np.arange(min(len(kept), config.max_detections))), soft


def _mean_count(score_lists, t):
    return float(np.mean([np.count_nonzero(s >= t) for s in score_lists]))


def calibrate_scores(score_lists, labeled_avg_instances, tolerance=0.02, max_iter=50, floor=0.0):
    """Bisect a score threshold so the mean count per image matches a target.

    ``score_lists`` holds the post-NMS scores of each unlabeled image.  The
    mean count is non-increasing in the threshold, which the bisection
    relies on.
    """
    if not score_lists:
        raise InputError("need at least one unlabeled scene")
    if not labeled_avg_instances > 0:
        raise InputError("labeled average must be positive")
    target = float(labeled_avg_instances)
    tol = tolerance * target

    lowest = max(floor, 1e-6)
    if _mean_count(score_lists, lowest) < target - tol:
        logger.warning("calibration target %.3f unreachable: %.3f instances at the floor",
                       target, _mean_count(score_lists, lowest))
        return CalibrationResult(lowest, target, _mean_count(score_lists, lowest), False, True)

    lo, hi = 0.0, 1.0
    best = None
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        avg = _mean_count(score_lists, mid)
        if best is None or abs(avg - target) < abs(best[1] - target):
            best = (mid, avg)
        if abs(avg - target) <= tol:
            return CalibrationResult(mid, target, avg, True, False)
        if avg > target:
            lo = mid
        else:
            hi = mid
    logger.warning("calibration did not reach tolerance; closest mean %.3f", best[1])
    return CalibrationResult(best[0], target, best[1], False, False)


def calibrate_threshold(teacher, anchors, unlabeled_grids, labeled_avg_instances, config=InferenceConfig(),
                        tolerance=0.02, max_iter=50) -> CalibrationResult:
    score_lists = [detect(teacher, anchors, g, config)[0].scores for g in unlabeled_grids]
    return calibrate_scores(score_lists, labeled_avg_instances, tolerance, max_iter, config.score_floor)


def generate_targets(teacher, anchors, scenes, calibration: CalibrationResult, config=InferenceConfig()):
    records = []
    for scene in scenes:
        dets, soft = detect(teacher, anchors, scene.grid, config)
        hard = dets.take(np.flatnonzero(dets.scores >= calibration.threshold))
        records.append(TargetRecord(scene.scene_id, hard.to_list(), soft))
    return records


# ---------------------------------------------------------------------------
# persistence


def write_records(directory, records, calibration=None, config_hash=""):
    """Write ``records.jsonl`` plus one float32 blob of soft targets.

    Records are ordered by scene id; each points at its block by byte
    offset into the blob.
    """
    os.makedirs(directory, exist_ok=True)
    records = sorted(records, key=lambda r: r.scene_id)
    header = {"format": RECORDS_FORMAT, "version": RECORDS_VERSION, "count": len(records),
              "config_hash": config_hash,
              "calibration": asdict(calibration) if calibration is not None else None}
    offset = 0
    with open(os.path.join(directory, SOFT_BLOB), "wb") as blob, \
            open(os.path.join(directory, "records.jsonl"), "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            soft = np.ascontiguousarray(rec.soft_targets, dtype="<f4")
            blob.write(soft.tobytes())
            line = {
                "scene_id": rec.scene_id,
                "hard_targets": [{"class_id": d.class_id, "x1": d.box[0], "y1": d.box[1],
                                  "x2": d.box[2], "y2": d.box[3], "score": d.score}
                                 for d in rec.hard_targets],
                "soft_targets": {"path": SOFT_BLOB, "offset": offset,
                                 "anchors": int(soft.shape[0]), "classes": int(soft.shape[1])},
            }
            offset += soft.nbytes
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    return os.path.join(directory, "records.jsonl")


def read_records(path):
    """Read a records file (or its directory); returns ``(header, records)``."""
    if os.path.isdir(path):
        path = os.path.join(path, "records.jsonl")
    directory = os.path.dirname(path)
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != RECORDS_FORMAT:
            raise InputError(f"{path}: not a target-record file")
        lines = [json.loads(line) for line in fh if line.strip()]
    blobs = {}
    records = []
    for line in lines:
        ref = line["soft_targets"]
        blob_path = os.path.join(directory, ref["path"])
        if blob_path not in blobs:
            blobs[blob_path] = np.fromfile(blob_path, dtype="<f4")
        start = ref["offset"] // 4
        size = ref["anchors"] * ref["classes"]
        soft = blobs[blob_path][start:start + size].reshape(ref["anchors"], ref["classes"])
        hard = [Detection(int(d["class_id"]), (d["x1"], d["y1"], d["x2"], d["y2"]), d["score"])
                for d in line["hard_targets"]]
        records.append(TargetRecord(line["scene_id"], hard, soft.astype(np.float32)))
    records.sort(key=lambda r: r.scene_id)
    return header, records
