"""
Rational normal form: denominators, term algebra, homological equation and the integrable iteration
"""

import math

import numpy as np
import pytest

from conftest import random_state
import nekhoroshev_lab.rational_nf as rational_nf
from nekhoroshev_lab.errors import (DomainError, HBudgetExceeded, NonResonantDomainViolation, PreconditionError,
                                    SmallnessViolated)
from nekhoroshev_lab.kernel import KernelSpec, NonResonanceParams
from nekhoroshev_lab.lattice import FourierState, NormParams, WeightFunction
from nekhoroshev_lab.poly import PolyHamiltonian, action_quartic, build_hamiltonian
from nekhoroshev_lab.rational_nf import (NonResonantDomain, RationalHamiltonian, bracket_value, denominator_key,
                                         flow_map, gamma_shrink, homological_residual, integrable_normalize,
                                         parse_rational, rational_bracket, rational_homological_split,
                                         rational_vector_field, sampled_rational_norm, split_rational)
from nekhoroshev_lab.resonant_nf import resonant_normalize

# resonant, momentum-free, not action-type: {-2, 1, 1} against {-1, -1, 2}
SEXTIC = ((-2, 1), (1, 1), (1, 1), (-1, -1), (-1, -1), (2, -1))
QUARTIC = ((1, 1), (-1, 1), (0, -1), (0, -1))


class TestDenominatorKey:

    def test_pairs_are_dropped(self):
        key, sign = denominator_key(((1, 1), (2, -1), (3, 1), (3, -1)))
        assert key == ((1, 1), (2, -1))
        assert sign == 1

    def test_sign_normalization(self):
        key, sign = denominator_key(((1, -1), (2, 1)))
        assert key == ((1, 1), (2, -1))
        assert sign == -1

    def test_action_type_has_no_denominator(self):
        with pytest.raises(DomainError):
            denominator_key(((1, 1), (1, -1)))


class TestRationalAlgebra:

    def setup_method(self):
        self.rng = np.random.default_rng(17)
        self.spec = KernelSpec.power(1)
        self.M = 2
        self.Z = PolyHamiltonian.monomial(SEXTIC, 1.0)
        self.S, self.dK = rational_homological_split(self.Z, self.spec, self.M)
        self.K2 = RationalHamiltonian.from_poly(action_quartic(self.spec, self.M), self.spec, self.M, 6)

    def test_generator_shape(self):
        assert len(self.S) == 1
        assert len(self.dK) == 0
        term = self.S.terms[0]
        assert term.degree == 4
        assert term.order == 2
        assert term.h == 6

    def test_homological_residual(self):
        Z_rational = RationalHamiltonian.from_poly(self.Z, self.spec, self.M, 6)
        u = random_state(self.rng, self.M, 0.3)
        assert homological_residual(self.K2, self.S, Z_rational, u) <= 1e-6

    def test_action_terms_go_to_the_integrable_part(self):
        action = PolyHamiltonian.monomial(((1, 1), (1, -1), (2, 1), (2, -1)), 2.0)
        S, dK = rational_homological_split(self.Z + action, self.spec, self.M)
        assert len(S) == 1
        assert dK.allclose(action)

    def test_bracket_terms_match_gradient_evaluation(self):
        quartic = PolyHamiltonian({QUARTIC: 1.0}) + PolyHamiltonian({QUARTIC: 1.0}).conjugate()
        B = RationalHamiltonian.from_poly(quartic, self.spec, self.M, 6)
        u = random_state(self.rng, self.M, 0.4)
        assert rational_bracket(self.S, B).evaluate(u) == pytest.approx(bracket_value(self.S, B, u), rel=1e-9)

    def test_bracket_of_two_rational_terms(self):
        S_conj, _ = rational_homological_split(self.Z.conjugate(), self.spec, self.M)
        u = random_state(self.rng, self.M, 0.4)
        assert rational_bracket(self.S, S_conj).evaluate(u) == pytest.approx(bracket_value(self.S, S_conj, u),
                                                                            rel=1e-9)

    def test_h_budget(self):
        with pytest.raises(HBudgetExceeded):
            rational_homological_split(self.Z, self.spec, self.M, h_budget=4)

    def test_non_resonant_numerator(self):
        Z = PolyHamiltonian.monomial(((1, 1), (1, 1), (2, -1), (0, -1)), 1.0)
        with pytest.raises(PreconditionError):
            split_rational(RationalHamiltonian.from_poly(Z, self.spec, self.M, 4))

    def test_dump_round_trip(self):
        Q = self.S + self.K2
        back = parse_rational(Q.dump(), self.spec, self.M, 6)
        assert dict(back.items()) == dict(Q.items())


class TestDomainAndFlow:

    def setup_method(self):
        self.spec = KernelSpec.power(1)
        self.f = WeightFunction.gevrey(0.5)
        self.domain = NonResonantDomain(self.spec, NonResonanceParams(1e-3, 2, 3), NormParams(2.0, 1.0, 0.1), self.f)
        self.S, _ = rational_homological_split(PolyHamiltonian.monomial(SEXTIC, 1.0), self.spec, 2)

    def test_gamma_shrink(self):
        assert gamma_shrink(1.0, 0.1, 2) == pytest.approx(1.0 / 1.21 - 0.4 / 0.9)
        assert gamma_shrink(1.0, 1.0, 2) == -math.inf

    def test_field_refused_on_a_resonant_state(self):
        with pytest.raises(NonResonantDomainViolation):
            rational_vector_field(self.S, FourierState.zeros(2), self.domain)

    def test_flow_refused_outside_the_domain(self):
        with pytest.raises(NonResonantDomainViolation):
            flow_map(self.S, FourierState.zeros(2), 1.0, self.domain)

    def test_flow_round_trip(self):
        u = random_state(np.random.default_rng(4), 2, 0.05)
        assert self.domain.contains(u, 0.0)
        back = flow_map(self.S, flow_map(self.S, u, 0.5, self.domain, gamma_floor=0.0), -0.5, self.domain,
                        gamma_floor=0.0)
        assert np.allclose(back.amplitudes, u.amplitudes, atol=1e-10)

    def test_sampled_norm_is_thread_independent(self, monkeypatch):
        rng = np.random.default_rng(6)
        states = [random_state(rng, 2, 0.05) for _ in range(5)]
        sequential = sampled_rational_norm(self.S, states, self.domain)
        monkeypatch.setattr(rational_nf, "THREADS", 3)
        assert sampled_rational_norm(self.S, states, self.domain) == sequential
        assert sequential > 0

    def test_flow_refused_below_a_shrunk_floor(self):
        u = random_state(np.random.default_rng(4), 2, 0.05)
        floor = gamma_shrink(1.0, 0.1, 2)
        assert floor > 0
        assert self.domain.contains(u, 0.0)
        assert not self.domain.contains(u, floor)
        with pytest.raises(NonResonantDomainViolation):
            flow_map(self.S, u, 0.5, self.domain, gamma_floor=floor)


class TestIntegrableNormalize:

    def setup_method(self):
        self.rng = np.random.default_rng(8)
        self.spec = KernelSpec.power(1)
        self.f = WeightFunction.gevrey(0.5)
        self.p = NormParams(2.0, 1.0, 1e-6)

    def _run(self, M: int, d: int, h_budget=None):
        nf = resonant_normalize(build_hamiltonian(self.spec, M), d, self.p, self.f)
        nr = NonResonanceParams(1e-8, M, d)
        return integrable_normalize(nf.H0 + nf.Z, d, self.p, nr, self.f, self.spec, h_budget, rng=self.rng)

    def test_single_step(self):
        result = self._run(2, 3)
        assert len(result.steps) == 1
        step = result.steps[0]
        assert step.norm_generator <= step.bound_generator
        assert step.homological_residual is None or step.homological_residual <= 1e-6

    def test_normal_form_commutes_with_actions(self):
        result = self._run(2, 3)
        u = random_state(self.rng, 2, 0.3)
        assert result.integrability_residual(u) <= 1e-6

    def test_transform_round_trip(self):
        result = self._run(2, 3)
        u = random_state(self.rng, 2, 1e-3)
        v = result.transform(u, gamma_floor=0.0)
        back = result.inverse_transform(v)
        assert np.allclose(back.amplitudes, u.amplitudes, rtol=0, atol=1e-8 * np.abs(u.amplitudes).max())

    def test_floors_follow_the_shrunk_gamma(self):
        result = self._run(2, 3)
        assert result.gamma_floors == [1e-8]
        # rho = 1 at the only step, so the image floor collapses
        assert result.image_floors == [0.0]
        assert result.summary()['gamma_floors'] == [1e-8]

    def test_transform_refuses_states_below_the_step_floor(self):
        nf = resonant_normalize(build_hamiltonian(self.spec, 2), 3, self.p, self.f)
        result = integrable_normalize(nf.H0 + nf.Z, 3, self.p, NonResonanceParams(0.3, 2, 3), self.f, self.spec)
        assert len(result.generators[0]) > 0
        u = random_state(self.rng, 2, 1e-3)
        with pytest.raises(NonResonantDomainViolation):
            result.transform(u)

    def test_requires_resonant_input(self):
        H = build_hamiltonian(self.spec, 2)
        with pytest.raises(PreconditionError):
            integrable_normalize(H, 3, self.p, NonResonanceParams(1e-8, 2, 3), self.f, self.spec)

    def test_smallness_gate(self):
        nf = resonant_normalize(build_hamiltonian(self.spec, 2), 3, self.p, self.f)
        with pytest.raises(SmallnessViolated):
            integrable_normalize(nf.H0 + nf.Z, 3, NormParams(2.0, 1.0, 1e-2), NonResonanceParams(1e-8, 2, 3),
                                 self.f, self.spec)

    @pytest.mark.slow
    def test_two_steps(self):
        result = self._run(2, 4, h_budget=16)
        assert len(result.steps) == 2
        for step in result.steps:
            assert step.norm_generator <= 1.0 / 8
        assert result.margins['n_samples'] == 200
        assert result.gamma_floors == [1e-8, max(result.steps[0].gamma_shrunk, 0.0)]
