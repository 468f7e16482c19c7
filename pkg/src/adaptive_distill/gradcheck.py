"""Randomized finite-difference audit of every loss kernel."""

from dataclasses import dataclass

import numpy as np

from .exceptions import InputError
from .losses import (
    LossHyperparams,
    SampleTerm,
    adl,
    fd_gradient,
    fdl,
    focal_loss,
    focal_shared_joint,
    kl_binary,
    l2_mimic,
)

GAMMAS = (0.0, 1.0, 2.0, 5.0)
BETAS = (0.0, 0.5, 1.0, 1.5)

_SCALAR_KERNELS = {
    "focal": focal_loss,
    "kl": kl_binary,
    "joint": focal_shared_joint,
    "fdl": fdl,
    "adl": adl,
}


@dataclass
class KernelReport:
    name: str
    trials: int
    max_rel_error: float
    worst_case: dict
    passed: bool


def _rel_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(numeric), 1e-8)


def check_kernels(trials=1000, seed=0, tol=1e-6, logit_range=40.0, h=1e-6, perturb=0.0):
    """Compare analytic and central-difference gradients.

    Each scalar kernel is evaluated on ``trials`` random
    (z, q, y, gamma, beta) tuples; the L2 mimic on ``trials`` random vector
    pairs, checking every coordinate.  The mimic loss is quadratic, so its
    central difference has no truncation error and uses the largest
    allowed step to keep roundoff down.  ``perturb`` adds a constant to every
    analytic gradient and exists only so tests can confirm a broken kernel
    is reported.
    """
    if trials < 1:
        raise InputError("trials must be at least 1")
    rng = np.random.default_rng(seed)
    reports = []
    for name, op in _SCALAR_KERNELS.items():
        worst, worst_case = 0.0, {}
        for _ in range(trials):
            hp = LossHyperparams(gamma=float(rng.choice(GAMMAS)), beta=float(rng.choice(BETAS)))
            z = float(rng.uniform(-logit_range, logit_range))
            q = float(rng.uniform(0.0, 1.0))
            y = int(rng.choice((-1, 1)))
            analytic = op(SampleTerm(z, q, y), hp).grad_logit + perturb
            numeric = fd_gradient(lambda x: op(SampleTerm(x, q, y), hp).value, z, h)
            err = _rel_error(analytic, numeric)
            if err > worst or not worst_case:
                worst = err
                worst_case = dict(z=z, q=q, y=y, gamma=hp.gamma, beta=hp.beta,
                                  analytic=analytic, numeric=numeric)
        reports.append(KernelReport(name, trials, worst, worst_case, worst <= tol))

    worst, worst_case = 0.0, {}
    for _ in range(trials):
        size = int(rng.integers(1, 5))
        t = rng.uniform(-5.0, 5.0, size)
        s = rng.uniform(-5.0, 5.0, size)
        _, grad = l2_mimic(t, s)
        for i in range(size):
            def f(x, i=i):
                s2 = s.copy()
                s2[i] = x
                return l2_mimic(t, s2)[0]
            err = _rel_error(grad[i] + perturb, fd_gradient(f, s[i], 1e-4))
            if err > worst or not worst_case:
                worst = err
                worst_case = dict(index=i, analytic=grad[i] + perturb)
    reports.append(KernelReport("l2_mimic", trials, worst, worst_case, worst <= tol))
    return reports


def format_table(reports):
    lines = [f"{'kernel':<10} {'trials':>7} {'max_rel_err':>12}  result"]
    for r in reports:
        lines.append(f"{r.name:<10} {r.trials:>7} {r.max_rel_error:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
