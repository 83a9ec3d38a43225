"""
Kernel coefficients, frequencies and the non-resonance margin
"""

import math

import numpy as np
import pytest

from conftest import random_state
from nekhoroshev_lab.errors import DomainError, EnumerationOverflow, ModeOutOfRange
from nekhoroshev_lab.kernel import (FrequencyConvention, KernelSpec, NonResonanceParams, charge_vector,
                                    charge_vectors, count_charge_vectors, exponential_gradient_constant,
                                    frequency, frequency_action_gradient, frequency_matrix, lipschitz_check,
                                    lipschitz_rhs, nonresonance_margin, nonresonance_margin_bruteforce)
from nekhoroshev_lab.lattice import FourierState, NormParams, WeightFunction, weight_vector, weighted_norm


class TestKernelSpec:

    def test_power_law_coefficients(self):
        spec = KernelSpec.power(2)
        assert spec.coeff(0) == 0.0
        assert spec.coeff(2) == pytest.approx(0.25)
        assert spec.coeff(-2) == spec.coeff(2)

    def test_exponential_coefficients(self):
        spec = KernelSpec.exponential(1.0)
        assert spec.coeff(0) == 1.0
        assert spec.coeff(1) == pytest.approx(math.exp(-1))

    def test_exact_coefficients_only_for_power_law(self):
        assert str(KernelSpec.power(1).coeff_exact(3)) == "1/3"
        with pytest.raises(DomainError):
            KernelSpec.exponential().coeff_exact(1)

    def test_invalid_parameters(self):
        with pytest.raises(DomainError):
            KernelSpec.power(0)
        with pytest.raises(DomainError):
            KernelSpec.exponential(0.5)

    def test_config_round_trip(self):
        spec = KernelSpec.exponential(2.0)
        assert KernelSpec.from_config(spec.to_config()) == spec


class TestFrequencies:

    def setup_method(self):
        self.rng = np.random.default_rng(3)
        self.J = ((1, 1), (2, 1), (0, -1), (3, -1))

    def test_printed_matrix_is_twice_the_kernel(self):
        spec = KernelSpec.exponential()
        W = frequency_matrix(spec, 2)
        assert W[2, 3] == pytest.approx(2 * math.exp(-1))
        assert W[2, 2] == pytest.approx(2.0)

    def test_hamiltonian_matrix_adds_the_self_coupling(self):
        spec = KernelSpec.exponential()
        W = frequency_matrix(spec, 2, FrequencyConvention.HAMILTONIAN)
        assert W[2, 3] == pytest.approx(1.0 + math.exp(-1))
        assert W[2, 2] == pytest.approx(1.0)

    @pytest.mark.parametrize("convention", list(FrequencyConvention))
    def test_gradient_matches_matrix_column(self, convention):
        spec = KernelSpec.exponential()
        M = 3
        W = frequency_matrix(spec, M, convention)
        row = charge_vector(self.J, M) @ W
        for jstar in range(-M, M + 1):
            assert frequency_action_gradient(spec, self.J, jstar, convention) == pytest.approx(row[jstar + M])

    def test_frequency_is_linear_in_actions(self):
        spec = KernelSpec.power(1)
        u = random_state(self.rng, 3, 0.1)
        expected = sum(s * (frequency_matrix(spec, 3) @ u.actions)[j + 3] for j, s in self.J)
        assert frequency(spec, self.J, u, 3) == pytest.approx(expected)

    def test_entry_beyond_cutoff(self):
        with pytest.raises(ModeOutOfRange):
            frequency(KernelSpec.power(1), ((4, 1), (4, -1)), FourierState.zeros(3), 3)


class TestChargeEnumeration:

    def test_small_count_and_representatives(self):
        C = charge_vectors(3, 2)
        assert C.shape == (9, 3)
        for row in C:
            first = row[np.nonzero(row)[0][0]]
            assert first > 0
            assert np.abs(row).sum() % 2 == 0

    def test_count_formula(self):
        # all of Z^3 with l1 <= 2: 1 + 6 + 18
        assert count_charge_vectors(3, 2) == 25

    def test_budget(self):
        with pytest.raises(EnumerationOverflow):
            charge_vectors(5, 4, budget=10)


class TestNonResonanceMargin:

    def setup_method(self):
        self.rng = np.random.default_rng(5)
        self.f = WeightFunction.gevrey(0.5)
        self.p = NormParams(1.0, 0.5, 1.0)

    def test_agrees_with_bruteforce(self):
        spec = KernelSpec.power(1)
        nr = NonResonanceParams(1e-3, 2, 2)
        u = random_state(self.rng, 2, 0.2)
        fast = nonresonance_margin(spec, u, nr, self.p, self.f)
        slow = nonresonance_margin_bruteforce(spec, u, nr, self.p, self.f)
        assert fast == pytest.approx(slow, rel=1e-10, abs=1e-14)

    def test_zero_state_is_on_the_boundary(self):
        nr = NonResonanceParams(1e-3, 2, 2)
        assert nonresonance_margin(KernelSpec.power(1), FourierState.zeros(2), nr, self.p, self.f) == 0.0

    def test_argmin_is_reported(self):
        nr = NonResonanceParams(0.0, 2, 2)
        u = random_state(self.rng, 2, 0.2)
        result = nonresonance_margin(KernelSpec.exponential(), u, nr, self.p, self.f, return_argmin=True)
        assert result.argmin is not None
        assert result.margin == pytest.approx(result.min_abs_omega)

    def test_invalid_parameters(self):
        with pytest.raises(DomainError):
            NonResonanceParams(-1.0, 2, 2)
        with pytest.raises(DomainError):
            NonResonanceParams(0.1, 0, 2)


class TestLipschitz:

    @pytest.mark.parametrize("spec", [KernelSpec.power(1), KernelSpec.exponential()])
    @pytest.mark.parametrize("M,d", [(2, 2), (3, 2), (3, 4)])
    def test_no_violations(self, spec, M, d):
        report = lipschitz_check(spec, M, d, 200, NormParams(1.0, 0.5, 1.0), WeightFunction.gevrey(0.5),
                                 np.random.default_rng(9))
        assert report.passed
        assert report.violations == 0
        assert report.worst_slack >= 0

    @pytest.mark.parametrize("spec", [KernelSpec.power(1), KernelSpec.exponential()])
    @pytest.mark.parametrize("convention", list(FrequencyConvention))
    def test_printed_bound_fails_at_equal_norm(self, spec, convention):
        M, x = 2, 0.3
        p, f = NormParams(1.0, 0.5, 1.0), WeightFunction.gevrey(0.5)
        w = weight_vector(M, p.s, f)
        u = FourierState.from_modes(M, {0: x})
        v = FourierState.from_modes(M, {1: x * w[M] / w[M + 1]})
        assert weighted_norm(u, p, f) == pytest.approx(weighted_norm(v, p, f), rel=1e-14)
        J = [(0, 1), (1, -1)]
        lhs = abs(frequency(spec, J, u, M, convention) - frequency(spec, J, v, M, convention))
        assert lhs > 1e-3
        assert lipschitz_rhs(spec, 2, u, v, p, f, convention, printed=True) < 1e-12
        assert lipschitz_rhs(spec, 2, u, v, p, f, convention) >= lhs

    def test_exponential_gradient_constant(self):
        assert exponential_gradient_constant() == pytest.approx(0.41802, abs=1e-5)
