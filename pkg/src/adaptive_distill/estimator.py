"""scikit-learn style wrappers around the detector and the teacher annotator.

``X`` is always a sequence of :class:`~adaptive_distill.scenes.Scene`
objects (or raw ``(H, W, F)`` grids for prediction).  Ground truth rides
on the scenes, so ``y`` is accepted only for API compatibility.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .boxes import make_anchors
from .exceptions import InputError
from .losses import LossHyperparams
from .metrics import evaluate
from .model import DenseModel
from .scenes import Scene
from .teacher import InferenceConfig, calibrate_threshold, detect, generate_targets, soft_target_map
from .training import AssignConfig, TrainerConfig, train


def check_scenes(X, require_labels=False):
    """Validate a non-empty sequence of scenes sharing one grid shape."""
    if isinstance(X, Scene):
        X = [X]
    scenes = list(X)
    if not scenes:
        raise InputError("expected at least one scene")
    for s in scenes:
        if not isinstance(s, Scene):
            raise InputError(f"expected Scene objects, got {type(s).__name__}")
    shapes = {s.grid.shape for s in scenes}
    if len(shapes) != 1:
        raise InputError(f"scenes have mixed grid shapes {sorted(shapes)}")
    if require_labels and not any(len(s.classes) for s in scenes):
        raise InputError("no ground-truth boxes in the training scenes")
    return scenes


def check_grids(X, num_features=None):
    """Accept scenes or raw grids; return a list of float64 ``(H, W, F)`` arrays."""
    if isinstance(X, (Scene, np.ndarray)) and not (isinstance(X, np.ndarray) and X.ndim == 4):
        X = [X]
    grids = []
    for item in X:
        g = item.grid if isinstance(item, Scene) else np.asarray(item, dtype=np.float64)
        if g.ndim != 3:
            raise InputError(f"grid must have shape (H, W, F), got {g.shape}")
        if not np.all(np.isfinite(g)):
            raise InputError("grid contains non-finite values")
        if num_features is not None and g.shape[2] != num_features:
            raise InputError(f"grid has {g.shape[2]} features, expected {num_features}")
        grids.append(g)
    if not grids:
        raise InputError("expected at least one grid")
    return grids


class DenseDetector(BaseEstimator):
    """The toy dense detector trained with any of the supported loss modes.

    Parameters mirror :class:`TrainerConfig`, :class:`LossHyperparams` and
    :class:`InferenceConfig`; ``teacher`` is a fitted :class:`DenseDetector`
    or :class:`DenseModel` for the distillation modes.
    """

    def __init__(self, num_classes=3, window=3, scales=(1.5, 2.5, 4.0), loss_mode="baseline",
                 learning_rate=0.05, momentum=0.9, weight_decay=1e-4, iterations=2000, batch_size=8,
                 seed=0, gamma=2.0, beta=1.5, theta=1.8, alpha=1.0, t_pos=0.5, t_neg=0.4,
                 score_floor=0.05, nms_iou=0.5, max_detections=100, teacher=None, workers=1):
        self.num_classes = num_classes
        self.window = window
        self.scales = scales
        self.loss_mode = loss_mode
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.iterations = iterations
        self.batch_size = batch_size
        self.seed = seed
        self.gamma = gamma
        self.beta = beta
        self.theta = theta
        self.alpha = alpha
        self.t_pos = t_pos
        self.t_neg = t_neg
        self.score_floor = score_floor
        self.nms_iou = nms_iou
        self.max_detections = max_detections
        self.teacher = teacher
        self.workers = workers

    def _inference(self):
        return InferenceConfig(self.score_floor, 1000, self.nms_iou, self.max_detections)

    def _teacher_model(self):
        if self.teacher is None:
            return None
        if isinstance(self.teacher, DenseDetector):
            check_is_fitted(self.teacher, "model_")
            return self.teacher.model_
        return self.teacher

    def fit(self, X, y=None, routes=None):
        scenes = check_scenes(X, require_labels=routes is None)
        h, w, f = scenes[0].grid.shape
        self.anchors_ = make_anchors(h, w, tuple(self.scales))
        model = DenseModel(self.num_classes, f, len(self.scales), self.window)
        config = TrainerConfig(self.learning_rate, self.momentum, self.weight_decay, self.iterations,
                               self.batch_size, self.seed, (0.7, 0.9), self.loss_mode, self.workers)
        hp = LossHyperparams(self.gamma, self.beta, self.theta, self.alpha)
        result = train(model, scenes, self.anchors_, config, hp, self._teacher_model(), routes,
                       AssignConfig(self.t_pos, self.t_neg))
        self.model_ = result.model
        self.loss_log_ = result.loss_log
        self.n_features_in_ = f
        return self

    def decision_function(self, X):
        """Class logits per anchor: ``(n_scenes, n_anchors, num_classes)``."""
        check_is_fitted(self, "model_")
        grids = check_grids(X, self.n_features_in_)
        return np.stack([self.model_.forward(g)[:, :self.num_classes] for g in grids])

    def predict_proba(self, X):
        """Soft-target maps (float32) for each scene."""
        check_is_fitted(self, "model_")
        return np.stack([soft_target_map(self.model_, g) for g in check_grids(X, self.n_features_in_)])

    def predict(self, X):
        """Post-NMS detections, one :class:`DetectionArrays` per scene."""
        check_is_fitted(self, "model_")
        grids = check_grids(X, self.n_features_in_)
        return [detect(self.model_, self.anchors_, g, self._inference())[0] for g in grids]

    def score(self, X, y=None):
        """COCO-style AP (IoU 0.50:0.95) on labeled scenes."""
        scenes = check_scenes(X)
        report = evaluate(self.predict(scenes), [s.boxes for s in scenes], [s.classes for s in scenes],
                          self.num_classes)
        return 0.0 if report.ap is None else report.ap


class TargetGenerator(TransformerMixin, BaseEstimator):
    """Calibrates a teacher's score threshold on unlabeled scenes, then
    turns scenes into :class:`TargetRecord` objects.

    ``labeled_avg_instances`` is the mean number of ground-truth boxes per
    labeled image; ``fit`` picks the threshold that reproduces it.
    """

    def __init__(self, teacher=None, labeled_avg_instances=1.0, scales=(1.5, 2.5, 4.0), tolerance=0.02,
                 max_iter=50, score_floor=0.05, nms_iou=0.5, max_detections=100):
        self.teacher = teacher
        self.labeled_avg_instances = labeled_avg_instances
        self.scales = scales
        self.tolerance = tolerance
        self.max_iter = max_iter
        self.score_floor = score_floor
        self.nms_iou = nms_iou
        self.max_detections = max_detections

    def _model(self):
        if isinstance(self.teacher, DenseDetector):
            check_is_fitted(self.teacher, "model_")
            return self.teacher.model_
        if self.teacher is None:
            raise InputError("TargetGenerator needs a teacher")
        return self.teacher

    def fit(self, X, y=None):
        scenes = check_scenes(X)
        h, w, _ = scenes[0].grid.shape
        self.anchors_ = make_anchors(h, w, tuple(self.scales))
        self.inference_ = InferenceConfig(self.score_floor, 1000, self.nms_iou, self.max_detections)
        self.calibration_ = calibrate_threshold(self._model(), self.anchors_, [s.grid for s in scenes],
                                                self.labeled_avg_instances, self.inference_,
                                                self.tolerance, self.max_iter)
        self.threshold_ = self.calibration_.threshold
        return self

    def transform(self, X):
        check_is_fitted(self, "calibration_")
        return generate_targets(self._model(), self.anchors_, check_scenes(X), self.calibration_,
                                self.inference_)
