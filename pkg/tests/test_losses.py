import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logit

from adaptive_distill.exceptions import InputError, OracleFailure, UsageError
from adaptive_distill.losses import (
    LossHyperparams,
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
    smooth_l1,
    teacher_entropy,
)

# Reference values from 40-digit mpmath evaluations of the closed forms.
FL_Z0_POS = 0.17328679513998633      # 0.25 * ln 2
KL_HALF_QUARTER = 0.14384103622589046  # 0.5 * ln(4/3)
ENTROPY_09 = 0.32508297339144824
DW_HALF = 0.15481812174617547        # (1 - e^-0.5)^2
ADW_HALF = 0.41789321881345248       # (1 - 2^-1.5)^2
ADL_BETA0 = 0.0025818304387106       # DW(KL) * KL for q=.5, p=.25
ADL_BETA15 = 0.069241847665412
FDL_EXAMPLE = 0.092016051792124      # 0.25 * KL(0.9 || 0.5)
NORM_HALF = 0.28717458874925875      # 0.5 ** 1.8

HP = LossHyperparams()
Z_QUARTER = float(logit(0.25))


class TestHyperparams:
    def test_defaults(self):
        assert (HP.gamma, HP.beta, HP.theta, HP.alpha, HP.eps) == (2.0, 1.5, 1.8, 1.0, 1e-6)
        assert HP.detach_weight is False

    @pytest.mark.parametrize("kw", [dict(gamma=-1), dict(beta=-0.1), dict(theta=0), dict(alpha=0),
                                    dict(alpha=1.5), dict(gamma=float("nan")), dict(eps=0), dict(eps=1e-2)])
    def test_invalid(self, kw):
        with pytest.raises(InputError):
            LossHyperparams(**kw)


class TestFocal:
    def test_half_probability_positive(self):
        r = focal_loss(SampleTerm(0.0, hard_label=1), HP)
        assert r.value == pytest.approx(FL_Z0_POS, rel=1e-14)

    def test_gamma_zero_is_cross_entropy(self):
        r = focal_loss(SampleTerm(0.0, hard_label=-1), LossHyperparams(gamma=0))
        assert r.value == pytest.approx(math.log(2), rel=1e-14)

    def test_saturation(self):
        r = focal_loss(SampleTerm(40.0, hard_label=1), HP)
        assert r.value < 1e-30 and abs(r.grad_logit) < 1e-30

    def test_alpha_balancing(self):
        hp = LossHyperparams(alpha=0.25, gamma=0)
        assert focal_loss(SampleTerm(0.0, hard_label=1), hp).value == pytest.approx(0.25 * math.log(2))
        assert focal_loss(SampleTerm(0.0, hard_label=-1), hp).value == pytest.approx(0.75 * math.log(2))

    def test_missing_label(self):
        with pytest.raises(UsageError):
            focal_loss(SampleTerm(0.0, 0.5), HP)

    def test_non_finite_logit(self):
        with pytest.raises(InputError):
            focal_loss(SampleTerm(float("inf"), hard_label=1), HP)

    def test_bad_label(self):
        with pytest.raises(InputError):
            focal_loss(SampleTerm(0.0, hard_label=0), HP)


class TestKL:
    def test_identical(self):
        assert kl_binary(SampleTerm(0.0, 0.5), HP).value == 0.0

    def test_reference(self):
        assert kl_binary(SampleTerm(Z_QUARTER, 0.5), HP).value == pytest.approx(KL_HALF_QUARTER, rel=1e-13)

    def test_minimum_gradient(self):
        assert kl_binary(SampleTerm(float(logit(0.9)), 0.9), HP).grad_logit == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("q", [-0.1, 1.1, float("nan")])
    def test_q_out_of_range(self, q):
        with pytest.raises(InputError):
            kl_binary(SampleTerm(0.0, q), HP)

    @given(st.floats(-40, 40), st.floats(0, 1))
    def test_grad_is_p_minus_q(self, z, q):
        qc = min(max(q, HP.eps), 1 - HP.eps)
        r = kl_binary(SampleTerm(z, q), HP)
        assert r.value >= 0
        assert r.grad_logit == pytest.approx(1 / (1 + math.exp(-z)) - qc, abs=1e-15)


class TestEntropyAndWeights:
    def test_entropy(self):
        assert teacher_entropy(0.5) == pytest.approx(math.log(2), rel=1e-15)
        assert teacher_entropy(0.9) == pytest.approx(ENTROPY_09, rel=1e-14)
        assert teacher_entropy(1.0) < 2e-5

    def test_distill_weight(self):
        assert distill_weight(0.0, 2.0) == 0.0
        assert distill_weight(0.5, 2.0) == pytest.approx(DW_HALF, rel=1e-14)
        assert distill_weight(50.0, 2.0) == pytest.approx(1.0)
        with pytest.raises(InputError):
            distill_weight(-0.1, 2.0)

    def test_adaptive_weight(self):
        assert adaptive_distill_weight(0.0, 0.0, HP) == 0.0
        assert adaptive_distill_weight(0.0, math.log(2), HP) == pytest.approx(ADW_HALF, rel=1e-14)
        with pytest.raises(InputError):
            adaptive_distill_weight(-1.0, 0.1, HP)
        with pytest.raises(InputError):
            adaptive_distill_weight(0.1, -1.0, HP)

    @given(st.floats(0, 20))
    def test_beta_zero_reduces_to_dw(self, kl):
        hp = LossHyperparams(beta=0.0)
        assert adaptive_distill_weight(kl, 0.4, hp) == distill_weight(kl, hp.gamma)

    @given(st.floats(0, 5), st.floats(0, 5), st.floats(0.01, 0.7), st.sampled_from([0.5, 1.0, 2.0, 5.0]))
    def test_monotone(self, kl1, kl2, t, gamma):
        lo, hi = sorted((kl1, kl2))
        hp = LossHyperparams(gamma=gamma)
        w_lo, w_hi = adaptive_distill_weight(lo, t, hp), adaptive_distill_weight(hi, t, hp)
        assert 0 <= w_lo <= w_hi < 1
        betas = [adaptive_distill_weight(lo, t, LossHyperparams(gamma=gamma, beta=b)) for b in (0, 0.5, 1, 1.5)]
        assert all(a <= b for a, b in zip(betas, betas[1:]))


class TestADL:
    def test_zero_at_match(self):
        r = adl(SampleTerm(float(logit(0.9)), 0.9), HP)
        assert r.value == 0.0 and abs(r.grad_logit) < 1e-15

    def test_reference_beta0(self):
        r = adl(SampleTerm(Z_QUARTER, 0.5), LossHyperparams(beta=0))
        assert r.value == pytest.approx(ADL_BETA0, rel=1e-12)

    def test_reference_beta15(self):
        r = adl(SampleTerm(Z_QUARTER, 0.5), HP)
        assert r.value == pytest.approx(ADL_BETA15, rel=1e-12)
        assert r.value > ADL_BETA0

    @given(st.floats(-30, 30), st.floats(0, 1))
    def test_beta0_equals_dw_times_kl(self, z, q):
        hp = LossHyperparams(beta=0)
        kl = kl_binary(SampleTerm(z, q), hp).value
        assert adl(SampleTerm(z, q), hp).value == pytest.approx(distill_weight(kl, 2.0) * kl, rel=1e-12, abs=1e-300)

    def test_detached_weight_gradient(self):
        hp = LossHyperparams(detach_weight=True)
        term = SampleTerm(Z_QUARTER, 0.5)
        kl = kl_binary(term, hp)
        w = adaptive_distill_weight(kl.value, teacher_entropy(0.5), hp)
        assert adl(term, hp).grad_logit == pytest.approx(w * kl.grad_logit, rel=1e-12)
        assert adl(term, hp).value == adl(term, HP).value

    @given(st.floats(-40, 40), st.floats(0, 1))
    def test_finite_everywhere(self, z, q):
        for op in (adl, kl_binary):
            r = op(SampleTerm(z, q), HP)
            assert math.isfinite(r.value) and math.isfinite(r.grad_logit) and r.value >= 0


class TestFDLAndJoint:
    def test_fdl_reference(self):
        r = fdl(SampleTerm(0.0, 0.9, 1), HP)
        assert r.value == pytest.approx(FDL_EXAMPLE, rel=1e-12)

    def test_fdl_zero_at_match(self):
        assert fdl(SampleTerm(float(logit(0.3)), 0.3, -1), HP).value == pytest.approx(0.0, abs=1e-17)

    def test_fdl_saturated(self):
        assert fdl(SampleTerm(40.0, 0.2, 1), HP).value < 1e-30

    def test_joint_stationary_at_saturation(self):
        z = float(logit(1 - 1e-6))
        for q in (1e-6, 0.1, 0.5, 0.9):
            assert abs(focal_shared_joint(SampleTerm(z, q, 1), HP).grad_logit) <= 1e-4

    def test_joint_at_match_keeps_ce(self):
        z = float(logit(0.8))
        r = focal_shared_joint(SampleTerm(z, 0.8, 1), HP)
        assert r.value == pytest.approx(focal_loss(SampleTerm(z, hard_label=1), HP).value, rel=1e-10)
        assert r.value > 0

    def test_joint_gamma0(self):
        r = focal_shared_joint(SampleTerm(0.0, 0.5, -1), LossHyperparams(gamma=0))
        assert r.value == pytest.approx(math.log(2))

    @pytest.mark.parametrize("op", [fdl, focal_shared_joint])
    def test_label_required(self, op):
        with pytest.raises(UsageError):
            op(SampleTerm(0.0, 0.5), HP)


class TestNormalizerAndMimic:
    def test_units(self):
        assert adl_normalizer([1, 1, 1], 1.8) == pytest.approx(3.0, abs=1e-12)
        assert adl_normalizer([0.5], 1.8) == pytest.approx(NORM_HALF, abs=1e-15)

    def test_background_floor(self):
        n = adl_normalizer([0.0] * 10, 1.8)
        assert n == pytest.approx(10 * 1e-6**1.8) and n > 0

    def test_empty(self):
        with pytest.raises(InputError):
            adl_normalizer([], 1.8)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=50), st.randoms())
    def test_permutation_and_concatenation(self, q, rnd):
        shuffled = list(q)
        rnd.shuffle(shuffled)
        assert adl_normalizer(shuffled) == adl_normalizer(q)
        assert adl_normalizer(q + q) == pytest.approx(2 * adl_normalizer(q), rel=1e-15)

    def test_l2_mimic(self):
        assert l2_mimic([0, 0], [1, 0])[0] == 0.5
        v, g = l2_mimic([0.3, -2.0], [0.3, -2.0])
        assert v == 0 and np.all(g == 0)
        with pytest.raises(InputError):
            l2_mimic([1, 2], [1])

    def test_smooth_l1(self):
        assert [r.value for r in smooth_l1([0.5, 2.0, -3.0, 1.0], [0, 0, 0, 1.0])] == [0.125, 1.5, 2.5, 0.0]
        assert [r.grad_logit for r in smooth_l1([0.5, 2.0, -3.0], [0, 0, 0])] == [0.5, 1.0, -1.0]


class TestImageLoss:
    def test_all_matching(self):
        terms = [[SampleTerm(float(logit(q)), q) for q in (0.1, 0.7)] for _ in range(3)]
        assert image_distill_loss(terms, HP).adl_sum == pytest.approx(0.0, abs=1e-15)

    def test_single_term(self):
        b = image_distill_loss([[SampleTerm(Z_QUARTER, 0.5)]], HP)
        assert b.normalizer_adl == pytest.approx(NORM_HALF)
        assert b.total == pytest.approx(ADL_BETA15 / NORM_HALF, rel=1e-12)

    def test_permutation(self):
        rng = np.random.default_rng(3)
        terms = [[SampleTerm(float(rng.normal()), float(rng.uniform()), int(rng.choice([-1, 1])))
                  for _ in range(2)] for _ in range(20)]
        a = image_distill_loss(terms, HP)
        b = image_distill_loss(terms[::-1], HP)
        assert a == b

    def test_breakdown_total(self):
        terms = [[SampleTerm(1.0, 0.8, 1), SampleTerm(-1.0, 0.1, -1)], [SampleTerm(0.0, 0.3, -1)] * 2]
        b = image_distill_loss(terms, HP)
        assert b.normalizer_focal == 1
        assert b.total == pytest.approx(b.focal_sum / 1 + b.adl_sum / b.normalizer_adl)

    def test_empty(self):
        with pytest.raises(InputError):
            image_distill_loss([], HP)


class TestFiniteDifference:
    def test_identity(self):
        assert fd_gradient(lambda x: x, 2.5) == pytest.approx(1.0, abs=1e-10)

    def test_square(self):
        assert fd_gradient(lambda x: x * x, 3.0, 1e-5) == pytest.approx(6.0, abs=1e-8)

    @pytest.mark.parametrize("h", [1e-8, 1e-3])
    def test_step_range(self, h):
        with pytest.raises(InputError):
            fd_gradient(lambda x: x, 0.0, h)

    def test_non_finite(self):
        with pytest.raises(OracleFailure):
            fd_gradient(lambda x: math.inf, 0.0)

    def test_adl_matches(self):
        q = 0.3
        for z in (-4.0, -0.2, 1.7, 6.0):
            num = fd_gradient(lambda x: adl(SampleTerm(x, q), HP).value, z, 1e-6)
            ana = adl(SampleTerm(z, q), HP).grad_logit
            assert abs(ana - num) / max(abs(num), 1e-8) <= 1e-6


def test_frozen_constants_match_mpmath():
    mp = pytest.importorskip("mpmath")
    mp.mp.dps = 40
    half, quarter = mp.mpf("0.5"), mp.mpf("0.25")
    kl = lambda q, p: q * mp.log(q / p) + (1 - q) * mp.log((1 - q) / (1 - p))
    dw = lambda k: (1 - mp.exp(-k)) ** 2
    t = lambda q: -(q * mp.log(q) + (1 - q) * mp.log(1 - q))
    k = kl(half, quarter)
    expected = {
        FL_Z0_POS: quarter * mp.log(2),
        KL_HALF_QUARTER: k,
        ENTROPY_09: t(mp.mpf("0.9")),
        DW_HALF: dw(half),
        ADW_HALF: dw(mp.mpf("1.5") * mp.log(2)),
        ADL_BETA0: dw(k) * k,
        ADL_BETA15: dw(k + mp.mpf("1.5") * t(half)) * k,
        FDL_EXAMPLE: quarter * kl(mp.mpf("0.9"), half),
        NORM_HALF: half ** mp.mpf("1.8"),
    }
    for frozen, exact in expected.items():
        assert frozen == pytest.approx(float(exact), rel=1e-13)
