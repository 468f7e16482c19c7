"""Loss kernels over anchor-class logits.

Every kernel works on logits ``z`` (student probability ``p = sigmoid(z)``)
and returns the loss value together with its analytic derivative with
respect to ``z``.  Log-probabilities are always taken through
``log_expit`` so saturated logits do not cancel catastrophically.

Two layers are exposed:

* array kernels (``*_terms``) that take broadcastable numpy arrays and
  return ``(value, grad)`` arrays; the trainer uses these directly;
* scalar operations taking a :class:`SampleTerm` and returning a
  :class:`LossResult`, which is what the gradient suite and most tests use.
"""

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .exceptions import InputError, OracleFailure, UsageError

__all__ = [
    "LossHyperparams",
    "SampleTerm",
    "LossResult",
    "ImageLossBreakdown",
    "clamp_prob",
    "kl_terms",
    "entropy",
    "distill_weight",
    "adaptive_distill_weight",
    "focal_terms",
    "adl_terms",
    "fdl_terms",
    "joint_terms",
    "smooth_l1_terms",
    "focal_loss",
    "kl_binary",
    "teacher_entropy",
    "adl",
    "fdl",
    "focal_shared_joint",
    "adl_normalizer",
    "l2_mimic",
    "smooth_l1",
    "image_distill_loss",
    "fd_gradient",
]


@dataclass(frozen=True)
class LossHyperparams:
    """Hyperparameters shared by all loss kernels.

    ``alpha == 1`` disables class balancing entirely (both positives and
    negatives get weight 1).  ``detach_weight`` treats the adaptive weight
    as a constant when differentiating ADL.
    """

    gamma: float = 2.0
    beta: float = 1.5
    theta: float = 1.8
    alpha: float = 1.0
    eps: float = 1e-6
    detach_weight: bool = False

    def __post_init__(self):
        for name in ("gamma", "beta", "theta", "alpha", "eps"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise InputError(f"{name} must be finite, got {value}")
        if self.gamma < 0 or self.beta < 0:
            raise InputError("gamma and beta must be non-negative")
        if self.theta <= 0:
            raise InputError(f"theta must be positive, got {self.theta}")
        if not 0 < self.alpha <= 1:
            raise InputError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0 < self.eps <= 1e-3:
            raise InputError(f"eps must lie in (0, 1e-3], got {self.eps}")


@dataclass(frozen=True)
class SampleTerm:
    """One anchor-class pair seen by the student.

    ``teacher_prob`` is stored as given and clamped when a kernel consumes
    it; ``hard_label`` is +1, -1 or None.
    """

    student_logit: float
    teacher_prob: Optional[float] = None
    hard_label: Optional[int] = None

    @property
    def student_prob(self) -> float:
        return float(expit(self.student_logit))


@dataclass(frozen=True)
class LossResult:
    value: float
    grad_logit: float


@dataclass(frozen=True)
class ImageLossBreakdown:
    """Per-image loss components and the normalizers that divide them."""

    focal_sum: float
    adl_sum: float
    loc_sum: float
    normalizer_focal: int
    normalizer_adl: float
    total: float


# ---------------------------------------------------------------------------
# array kernels


def clamp_prob(q, eps=1e-6):
    """Clamp probabilities into ``[eps, 1 - eps]`` after validating them."""
    q = np.asarray(q, dtype=np.float64)
    if not np.all(np.isfinite(q)) or np.any(q < 0) or np.any(q > 1):
        raise InputError("teacher probabilities must lie in [0, 1]")
    return np.clip(q, eps, 1.0 - eps)


def _check_logits(z):
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InputError("logits must be finite")
    return z


def _check_labels(y):
    y = np.asarray(y)
    if not np.all((y == 1) | (y == -1)):
        raise InputError("hard labels must be +1 or -1")
    return y.astype(np.float64)


def kl_terms(z, q):
    """Binary KL(q || sigmoid(z)) and its logit derivative ``p - q``.

    ``q`` must already be clamped.  Each log-ratio is computed as
    ``log1p(diff / p)`` so that the result keeps relative precision when
    the student is close to the teacher; ``diff`` is taken from the tail
    (p or 1 - p) that is represented accurately.
    """
    p = expit(z)
    pm = expit(-z)
    qm = 1.0 - q
    # an exact match in p gives exactly zero, consistent with the gradient
    d = np.where(p == q, 0.0, np.where(p < 0.5, q - p, pm - qm))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        near_pos = q * np.log1p(d / p)
        near_neg = qm * np.log1p(-d / pm)
        far_pos = q * (np.log(q) - log_expit(z))
        far_neg = qm * (np.log(qm) - log_expit(-z))
    pos = np.where(p > 1e-300, near_pos, far_pos)
    neg = np.where(pm > 1e-300, near_neg, far_neg)
    value = np.maximum(pos + neg, 0.0)
    return value, p - q


def entropy(q):
    """Binary entropy of clamped probabilities (natural log)."""
    return -(q * np.log(q) + (1.0 - q) * np.log1p(-q))


def _weight_and_slope(u, gamma):
    """``(1 - exp(-u))**gamma`` and its derivative with respect to ``u``."""
    w = -np.expm1(-u)
    weight = w**gamma
    if gamma == 0:
        return weight, np.zeros_like(w)
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = gamma * w ** (gamma - 1.0) * np.exp(-u)
    slope = np.where(w > 0, slope, 0.0)
    return weight, slope


def focal_terms(z, y, hp):
    """Focal loss with optional alpha balancing; ``y`` holds +1/-1."""
    s = y * z
    p_t = expit(s)
    log_pt = log_expit(s)
    mod = np.exp(hp.gamma * log_expit(-s))
    if hp.alpha == 1.0:
        alpha_t = 1.0
    else:
        alpha_t = np.where(y > 0, hp.alpha, 1.0 - hp.alpha)
    value = alpha_t * mod * -log_pt
    grad = y * alpha_t * mod * (hp.gamma * p_t * log_pt - expit(-s))
    return value, grad


def adl_terms(z, q, hp):
    """ADW * KL over clamped ``q``; gradient flows through both factors
    unless ``hp.detach_weight`` is set."""
    kl, dkl = kl_terms(z, q)
    weight, slope = _weight_and_slope(kl + hp.beta * entropy(q), hp.gamma)
    value = weight * kl
    if hp.detach_weight:
        grad = weight * dkl
    else:
        grad = (weight + kl * slope) * dkl
    return value, grad


def fdl_terms(z, q, y, hp):
    """Focal distillation baseline ``(1 - p_t)**gamma * KL``."""
    s = y * z
    mod = np.exp(hp.gamma * log_expit(-s))
    kl, dkl = kl_terms(z, q)
    value = mod * kl
    grad = -y * hp.gamma * mod * expit(s) * kl + mod * dkl
    return value, grad


def joint_terms(z, q, y, hp):
    """Focal term shared between cross-entropy and KL."""
    s = y * z
    p_t = expit(s)
    mod = np.exp(hp.gamma * log_expit(-s))
    kl, dkl = kl_terms(z, q)
    inner = -log_expit(s) + kl
    value = mod * inner
    grad = -y * hp.gamma * mod * p_t * inner + mod * (-y * expit(-s) + dkl)
    return value, grad


def smooth_l1_terms(pred, target, beta=1.0):
    """Elementwise smooth-L1 (quadratic below ``beta``) and its derivative."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    a = np.abs(d)
    value = np.where(a < beta, 0.5 * d * d / beta, a - 0.5 * beta)
    grad = np.where(a < beta, d / beta, np.sign(d))
    return value, grad


# ---------------------------------------------------------------------------
# scalar operations


def _need_q(term, hp):
    if term.teacher_prob is None:
        raise UsageError("this loss needs a teacher probability")
    return clamp_prob(term.teacher_prob, hp.eps)


def _need_y(term):
    if term.hard_label is None:
        raise UsageError("this loss needs a hard label")
    return _check_labels(term.hard_label)


def _result(value, grad):
    return LossResult(float(value), float(grad))


def focal_loss(term: SampleTerm, hp: LossHyperparams = LossHyperparams()) -> LossResult:
    y = _need_y(term)
    z = _check_logits(term.student_logit)
    return _result(*focal_terms(z, y, hp))


def kl_binary(term: SampleTerm, hp: LossHyperparams = LossHyperparams()) -> LossResult:
    q = _need_q(term, hp)
    z = _check_logits(term.student_logit)
    return _result(*kl_terms(z, q))


def teacher_entropy(q: float, eps: float = 1e-6) -> float:
    return float(entropy(clamp_prob(q, eps)))


def distill_weight(kl: float, gamma: float) -> float:
    """``(1 - exp(-kl))**gamma``; raises for negative ``kl``."""
    if not kl >= 0:
        raise InputError(f"kl must be non-negative, got {kl}")
    return float((-math.expm1(-kl)) ** gamma)


def adaptive_distill_weight(kl: float, t_q: float, hp: LossHyperparams = LossHyperparams()) -> float:
    if not kl >= 0 or not t_q >= 0:
        raise InputError("kl and teacher entropy must be non-negative")
    return float((-math.expm1(-(kl + hp.beta * t_q))) ** hp.gamma)


def adl(term: SampleTerm, hp: LossHyperparams = LossHyperparams()) -> LossResult:
    q = _need_q(term, hp)
    z = _check_logits(term.student_logit)
    return _result(*adl_terms(z, q, hp))


def fdl(term: SampleTerm, hp: LossHyperparams = LossHyperparams()) -> LossResult:
    y = _need_y(term)
    q = _need_q(term, hp)
    z = _check_logits(term.student_logit)
    return _result(*fdl_terms(z, q, y, hp))


def focal_shared_joint(term: SampleTerm, hp: LossHyperparams = LossHyperparams()) -> LossResult:
    y = _need_y(term)
    q = _need_q(term, hp)
    z = _check_logits(term.student_logit)
    return _result(*joint_terms(z, q, y, hp))


def adl_normalizer(q_per_anchor: Sequence[float], theta: float = 1.8, eps: float = 1e-6) -> float:
    """Sum of per-anchor foreground probabilities raised to ``theta``.

    Probabilities are floored at ``eps`` so an all-background image still
    has a positive normalizer; there is no log here, so no upper clamp.
    The sum is exactly rounded, so it does not depend on anchor order.
    """
    q = np.asarray(q_per_anchor, dtype=np.float64).ravel()
    if q.size == 0:
        raise InputError("normalizer needs at least one anchor")
    if theta <= 0:
        raise InputError(f"theta must be positive, got {theta}")
    q = np.maximum(clamp_prob(q, 0.0), eps)
    return math.fsum((q**theta).tolist())


def l2_mimic(teacher_logits, student_logits):
    """Half squared distance between logit vectors.

    Returns the scalar loss and the per-element gradient with respect to
    the student logits.
    """
    t = np.asarray(teacher_logits, dtype=np.float64)
    s = np.asarray(student_logits, dtype=np.float64)
    if t.shape != s.shape:
        raise InputError(f"length mismatch: {t.shape} vs {s.shape}")
    d = s - t
    return 0.5 * math.fsum((d * d).ravel().tolist()), d


def smooth_l1(delta_pred, delta_target):
    """Per-component smooth-L1 results (transition at 1)."""
    value, grad = smooth_l1_terms(delta_pred, delta_target)
    return [LossResult(float(v), float(g)) for v, g in zip(np.ravel(value), np.ravel(grad))]


def image_distill_loss(anchor_terms, hp: LossHyperparams = LossHyperparams()) -> ImageLossBreakdown:
    """Distillation loss for one image.

    ``anchor_terms`` is a sequence over anchors, each a sequence of
    :class:`SampleTerm` over classes.  ADL is summed over every
    anchor-class pair and divided by the teacher-probability normalizer;
    terms carrying a hard label also contribute focal loss, normalized by
    the number of anchors with a positive label.
    """
    if len(anchor_terms) == 0:
        raise InputError("image has no anchors")
    adl_values, focal_values, fg = [], [], []
    n_pos = 0
    for per_class in anchor_terms:
        positive = False
        for term in per_class:
            adl_values.append(adl(term, hp).value)
            if term.hard_label is not None:
                focal_values.append(focal_loss(term, hp).value)
                positive |= term.hard_label == 1
        n_pos += positive
        fg.append(max(term.teacher_prob for term in per_class))
    norm = adl_normalizer(fg, hp.theta, hp.eps)
    focal_sum = math.fsum(focal_values)
    adl_sum = math.fsum(adl_values)
    total = focal_sum / max(n_pos, 1) + adl_sum / norm
    return ImageLossBreakdown(focal_sum, adl_sum, 0.0, n_pos, norm, total)


def fd_gradient(f: Callable[[float], float], x: float, h: float = 1e-5) -> float:
    """Central finite difference of a scalar function."""
    if not 1e-7 <= h <= 1e-4:
        raise InputError(f"step {h} outside [1e-7, 1e-4]")
    hi, lo = f(x + h), f(x - h)
    if not (math.isfinite(hi) and math.isfinite(lo)):
        raise OracleFailure(f"non-finite evaluation near x={x}")
    return (hi - lo) / (2.0 * h)
