"""
Ball sampling, resonant fractions, derivative lower bounds and the volume identity
"""

import numpy as np
import pytest

from nekhoroshev_lab.errors import DomainError
from nekhoroshev_lab.kernel import (KernelSpec, NonResonanceParams, exponential_gradient_constant,
                                    power_law_gradient_bound)
from nekhoroshev_lab.lattice import FourierState, WeightFunction
from nekhoroshev_lab.measure import (BallSampler, RadiusNormalization, Threshold, ball_contains,
                                     derivative_lower_bound_check, gamma_sweep, marginal_ks_check,
                                     radial_mean_check, radial_mean_prediction, resonant_fraction, sample_ball,
                                     uniformity_chi2, volume_identity_check, wilson_interval)


class TestSampler:

    def setup_method(self):
        self.sampler = BallSampler(2, 1.0, WeightFunction.gevrey(0.5), 0.5, seed=13)

    def test_radial_mean_prediction(self):
        assert radial_mean_prediction(1) == pytest.approx(2.0 / 3.0)

    def test_radial_mean_matches(self):
        check = radial_mean_check(self.sampler, 20000)
        assert abs(check['z']) < 4.0

    def test_marginal_law(self):
        assert marginal_ks_check(self.sampler, jstar=1).p_value > 1e-3

    def test_uniformity(self):
        assert uniformity_chi2(self.sampler)['p_value'] > 1e-3

    def test_samples_lie_in_the_ball(self):
        u = sample_ball(self.sampler, np.random.default_rng(1))
        assert ball_contains(self.sampler, u)
        assert not ball_contains(self.sampler, FourierState.from_modes(2, {0: 10.0}))

    def test_seeded_batches_repeat(self):
        assert np.array_equal(self.sampler.batch(10), self.sampler.batch(10))

    def test_invalid_sampler(self):
        with pytest.raises(DomainError):
            BallSampler(1, 1.0, WeightFunction.gevrey(0.5), 0.0)


class TestVolumeIdentity:

    def test_beta_marginal(self):
        sampler = BallSampler(1, 1.0, WeightFunction.gevrey(0.5), 1.0, seed=2)
        report = volume_identity_check(sampler, jstar=0)
        assert report.K == 4
        assert report.exact_normalizer == pytest.approx(1.0 / 30.0)
        assert report.passed

    def test_mode_outside_sampler(self):
        sampler = BallSampler(1, 1.0, WeightFunction.gevrey(0.5), 1.0)
        with pytest.raises(DomainError):
            volume_identity_check(sampler, jstar=3)


class TestResonantFraction:

    def setup_method(self):
        self.spec = KernelSpec.exponential()
        self.sampler = BallSampler(2, 1.0, WeightFunction.gevrey(0.5), 0.1, seed=4)

    def test_sweep_is_monotone(self):
        frame = gamma_sweep(self.spec, 2, 2, self.sampler, [1e-2, 1e-4, 1e-3, 1e-1], 500)
        assert list(frame['gamma']) == sorted(frame['gamma'])
        assert frame['fraction'].is_monotonic_increasing

    def test_fraction_and_interval(self):
        estimate = resonant_fraction(self.spec, NonResonanceParams(1e-2, 2, 2), self.sampler, 500,
                                     Threshold.GAMMA_NORM2, RadiusNormalization.RADIUS)
        assert 0.0 <= estimate.ci_low <= estimate.fraction <= estimate.ci_high <= 1.0
        assert estimate.seed == 4

    def test_too_few_samples(self):
        with pytest.raises(DomainError):
            resonant_fraction(self.spec, NonResonanceParams(1e-2, 2, 2), self.sampler, 50)

    def test_sampler_mode_mismatch(self):
        with pytest.raises(DomainError):
            resonant_fraction(self.spec, NonResonanceParams(1e-2, 3, 2), self.sampler, 200)

    @pytest.mark.parametrize("k,n", [(0, 100), (50, 100), (100, 100)])
    def test_wilson_bounds(self, k, n):
        low, high = wilson_interval(k, n)
        assert 0.0 <= low <= k / n <= high <= 1.0


class TestDerivativeLowerBound:

    def test_exponential_kernel(self):
        report = derivative_lower_bound_check(KernelSpec.exponential(), d=1, M=2)
        assert report.passed
        assert report.n_checked > 0

    def test_power_law(self):
        report = derivative_lower_bound_check(KernelSpec.power(1), d=2, M=3)
        assert report.passed
        assert report.worst_ratio >= 1.0

    @pytest.mark.parametrize("p", [1, 2])
    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_exponential_floor_above_every_power_law_bound(self, p, d):
        # the largest power-law bound puts every entry on |j| <= 1
        strongest = power_law_gradient_bound(p, d, [(1, 1)] * (2 * d))
        assert 2.0 * exponential_gradient_constant() > strongest
