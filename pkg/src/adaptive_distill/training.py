"""SGD training of the dense head under every supported loss mode.

Per image the objective is::

    focal_sum / n_pos + loc_sum / n_pos + distill_sum / N

where ``n_pos = max(#positive anchors, 1)`` and ``N`` is the teacher
normalizer for ADL.  Which terms an image contributes is decided by its
:class:`Route`, so labeled and teacher-annotated images go through the same
code path.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import expit

from .boxes import assign_anchors, encode_boxes, IGNORE, POSITIVE
from .exceptions import InputError, NumericalAbort, UsageError
from .losses import (
    LossHyperparams,
    adl_normalizer,
    adl_terms,
    clamp_prob,
    fdl_terms,
    focal_terms,
    smooth_l1_terms,
)
from .model import DenseModel
from .teacher import soft_target_map

logger = logging.getLogger(__name__)

LOSS_MODES = ("baseline", "adl_distill", "fdl_baseline", "mimic_baseline", "self_distill")
DISTILL_MODES = LOSS_MODES[1:]


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    iterations: int = 2000
    batch_size: int = 8
    seed: int = 0
    lr_drop_points: tuple = (0.7, 0.9)
    loss_mode: str = "baseline"
    workers: int = 1

    def validate(self):
        if self.loss_mode not in LOSS_MODES:
            raise InputError(f"unknown loss mode {self.loss_mode!r}; choose from {LOSS_MODES}")
        if self.iterations < 0 or self.batch_size < 1 or self.workers < 1:
            raise InputError("iterations >= 0, batch_size >= 1 and workers >= 1 required")
        if self.learning_rate <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise InputError("invalid optimizer settings")
        if any(not 0 < f < 1 for f in self.lr_drop_points):
            raise InputError("lr drop points are fractions in (0, 1)")
        return self

    def lr_at(self, iteration):
        drops = sum(iteration >= int(round(f * self.iterations)) for f in self.lr_drop_points)
        return self.learning_rate * 0.1**drops


@dataclass
class Route:
    """Which supervision one training image receives.

    ``boxes``/``classes`` are the boxes used for focal and box losses:
    ground truth for labeled images, teacher hard targets otherwise.
    """

    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    use_focal: bool = True
    use_loc: bool = True
    use_soft: bool = False


def default_routes(scenes, loss_mode):
    soft = loss_mode != "baseline"
    return [Route(s.boxes, s.classes, True, True, soft) for s in scenes]


@dataclass(frozen=True)
class AssignConfig:
    t_pos: float = 0.5
    t_neg: float = 0.4


class _ImageObjective:
    """Loss and output-gradient of one image for a fixed student."""

    def __init__(self, anchors, hp, loss_mode, assign_cfg, teacher=None):
        self.anchors = anchors
        self.anchor_boxes = anchors.boxes
        self.hp = hp
        self.mode = loss_mode
        self.assign_cfg = assign_cfg
        self.teacher = teacher
        self._assign_cache = {}
        self._teacher_cache = {}

    def assignment(self, key, route):
        if key not in self._assign_cache:
            a = assign_anchors(self.anchor_boxes, route.boxes, route.classes,
                               self.assign_cfg.t_pos, self.assign_cfg.t_neg)
            targets = None
            if a.num_positive:
                pos = a.positive
                targets = encode_boxes(self.anchor_boxes[pos], route.boxes[a.gt_index[pos]])
            self._assign_cache[key] = (a, targets)
        return self._assign_cache[key]

    def teacher_outputs(self, key, grid):
        if key not in self._teacher_cache:
            if self.mode == "mimic_baseline":
                logits = self.teacher.forward(grid)[:, :self.teacher.num_classes]
                self._teacher_cache[key] = logits
            else:
                self._teacher_cache[key] = soft_target_map(self.teacher, grid)
        return self._teacher_cache[key]

    def __call__(self, student: DenseModel, key, scene, route: Route):
        x = student.features(scene.grid)
        out = student.forward_features(x)
        c = student.num_classes
        z = out[:, :c]
        grad = np.zeros_like(out)
        focal_sum = loc_sum = distill_sum = 0.0
        assignment, box_targets = self.assignment(key, route)
        n_pos = max(assignment.num_positive, 1)

        labels = None
        if route.use_focal or (route.use_soft and self.mode == "fdl_baseline"):
            labels = -np.ones_like(z)
            pos = np.flatnonzero(assignment.status == POSITIVE)
            labels[pos, assignment.class_id[pos]] = 1.0
            valid = assignment.status != IGNORE

        if route.use_focal:
            v, g = focal_terms(z[valid], labels[valid], self.hp)
            focal_sum = math.fsum(v.ravel().tolist())
            grad[valid, :c] += g / n_pos

        if route.use_loc and box_targets is not None:
            pos = assignment.positive
            v, g = smooth_l1_terms(out[pos, c:], box_targets)
            loc_sum = math.fsum(v.ravel().tolist())
            grad[pos, c:] += g / n_pos

        if route.use_soft:
            if self.mode == "baseline":
                raise UsageError("baseline mode does not take soft targets")
            teacher_out = self.teacher_outputs(key, scene.grid)
            if self.mode == "mimic_baseline":
                d = z - teacher_out
                distill_sum = 0.5 * math.fsum((d * d).ravel().tolist()) / len(z)
                grad[:, :c] += d / len(z)
            else:
                q_raw = teacher_out.astype(np.float64)
                q = clamp_prob(q_raw, self.hp.eps)
                if self.mode == "fdl_baseline":
                    v, g = fdl_terms(z[valid], q[valid], labels[valid], self.hp)
                    distill_sum = math.fsum(v.ravel().tolist()) / n_pos
                    grad[valid, :c] += g / n_pos
                else:
                    norm = adl_normalizer(q_raw.max(axis=1), self.hp.theta, self.hp.eps)
                    v, g = adl_terms(z, q, self.hp)
                    distill_sum = math.fsum(v.ravel().tolist()) / norm
                    grad[:, :c] += g / norm

        parts = {"focal": focal_sum / n_pos, "loc": loc_sum / n_pos, "distill": distill_sum}
        parts["total"] = parts["focal"] + parts["loc"] + parts["distill"]
        for term, value in parts.items():
            if not math.isfinite(value):
                raise NumericalAbort(f"non-finite {term} loss on scene {scene.scene_id}",
                                     scene_id=scene.scene_id, term=term)
        return parts, student.backward(x, grad)


def image_loss(student, scene, route, anchors, hp=LossHyperparams(), loss_mode="baseline",
               teacher=None, assign_cfg=AssignConfig()):
    """Loss components and parameter gradient for a single image."""
    return _ImageObjective(anchors, hp, loss_mode, assign_cfg, teacher)(student, 0, scene, route)


def _check_teacher(student, teacher, loss_mode):
    if loss_mode == "baseline":
        return
    if teacher is None:
        raise UsageError(f"loss mode {loss_mode!r} needs a teacher")
    if teacher.num_classes != student.num_classes or teacher.num_slots != student.num_slots:
        raise UsageError("teacher and student disagree on classes or anchor slots")
    if loss_mode == "self_distill" and (teacher.window != student.window
                                        or teacher.num_features != student.num_features):
        raise UsageError("self distillation needs identically parameterized teacher and student")


def _batches(n, batch_size, rng):
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start:start + batch_size]
        if n < batch_size:
            yield perm


@dataclass
class TrainResult:
    model: DenseModel
    loss_log: List[dict]


def train(student: DenseModel, scenes: Sequence, anchors, config: TrainerConfig = TrainerConfig(),
          hp: LossHyperparams = LossHyperparams(), teacher: Optional[DenseModel] = None,
          routes: Optional[Sequence[Route]] = None, assign_cfg=AssignConfig(),
          initialize=True) -> TrainResult:
    """Train ``student`` in place and return it with the per-iteration log.

    With ``initialize`` the student is re-initialized from the ``init``
    random stream; in ``self_distill`` mode it instead starts from the
    teacher's parameters.  Batches are drawn from per-epoch permutations of
    the ``data`` stream, and per-image gradients are reduced in batch
    order, so results do not depend on ``config.workers``.
    """
    config.validate()
    mode = config.loss_mode
    _check_teacher(student, teacher, mode)
    if not scenes:
        raise InputError("no training scenes")
    routes = default_routes(scenes, mode) if routes is None else list(routes)
    if len(routes) != len(scenes):
        raise InputError("one route per scene required")
    if mode == "baseline" and any(r.use_soft for r in routes):
        raise UsageError("baseline mode does not take soft targets")

    data_rng = np.random.default_rng([config.seed, 0])
    init_rng = np.random.default_rng([config.seed, 1])
    if mode == "self_distill":
        student.params[:] = teacher.params
    elif initialize:
        student.initialize(init_rng)

    objective = _ImageObjective(anchors, hp, mode, assign_cfg, teacher)
    velocity = np.zeros_like(student.params)
    batches = _batches(len(scenes), config.batch_size, data_rng)
    log = []
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None

    def run(i):
        return objective(student, int(i), scenes[i], routes[i])

    try:
        for it in range(config.iterations):
            lr = config.lr_at(it)
            batch = next(batches)
            results = list(pool.map(run, batch)) if pool else [run(i) for i in batch]
            grad = np.zeros_like(student.params)
            for _, g in results:
                grad += g
            grad /= len(batch)
            if not np.all(np.isfinite(grad)):
                raise NumericalAbort(f"non-finite gradient at iteration {it}",
                                     scene_id=scenes[batch[0]].scene_id, term="gradient")
            velocity = config.momentum * velocity + grad + config.weight_decay * student.params
            student.params -= lr * velocity
            row = {"iteration": it, "lr": lr}
            for key in ("total", "focal", "loc", "distill"):
                row[key] = math.fsum(p[key] for p, _ in results) / len(batch)
            log.append(row)
    finally:
        if pool:
            pool.shutdown()
    return TrainResult(student, log)
