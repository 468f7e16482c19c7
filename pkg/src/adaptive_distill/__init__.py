"""Adaptive distillation loss and semi-supervised distillation for a toy
dense single-stage detector."""

from .config import RunConfig
from .estimator import DenseDetector, TargetGenerator
from .exceptions import ConfigError, InputError, NumericalAbort, OracleFailure, UsageError
from .losses import (
    LossHyperparams,
    LossResult,
    SampleTerm,
    adaptive_distill_weight,
    adl,
    adl_normalizer,
    distill_weight,
    fd_gradient,
    fdl,
    focal_loss,
    focal_shared_joint,
    image_distill_loss,
    kl_binary,
    l2_mimic,
    teacher_entropy,
)

__version__ = "0.1.0"
