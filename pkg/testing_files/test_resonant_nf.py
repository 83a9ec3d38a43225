"""
Resonant normal form: homological splitting, Lie transforms and the step ledger
"""

import json

import numpy as np
import pytest
import sympy

from conftest import random_state
from nekhoroshev_lab.errors import PreconditionError, ScaleError, SmallnessViolated
from nekhoroshev_lab.kernel import KernelSpec
from nekhoroshev_lab.lattice import NormParams, WeightFunction, energy, is_action_type
from nekhoroshev_lab.poly import (PolyHamiltonian, action_quartic, build_hamiltonian, flow, poisson_bracket,
                                  quadratic_part)
from nekhoroshev_lab.resonant_nf import (homological_split, lie_transform, perturbation_bound, resonant_normalize,
                                         smallness_gate, step_radius)

# E = 1 + 1 - 0 - 0 = 2
NONRESONANT = ((1, 1), (-1, 1), (0, -1), (0, -1))
RESONANT = ((1, 1), (2, 1), (1, -1), (2, -1))


class TestHomologicalSplit:

    def test_nonresonant_monomial(self):
        P = PolyHamiltonian.monomial(NONRESONANT, 3, exact=True)
        S, dZ = homological_split(P)
        assert len(dZ) == 0
        assert S == PolyHamiltonian.monomial(NONRESONANT, sympy.Rational(3, 2) / sympy.I, exact=True)
        H0 = quadratic_part(2, exact=True)
        assert len(poisson_bracket(H0, S) - P) == 0

    def test_resonant_monomial(self):
        P = PolyHamiltonian.monomial(RESONANT, 1, exact=True)
        S, dZ = homological_split(P)
        assert len(S) == 0
        assert dZ == P

    def test_linear(self):
        P1 = PolyHamiltonian.monomial(NONRESONANT, 1, exact=True)
        P2 = PolyHamiltonian.monomial(RESONANT, 2, exact=True) + PolyHamiltonian.monomial(NONRESONANT, 5, exact=True)
        S1, Z1 = homological_split(P1)
        S2, Z2 = homological_split(P2)
        S, Z = homological_split(P1 + P2)
        assert S == S1 + S2
        assert Z == Z1 + Z2

    def test_whole_quartic(self, power_kernel):
        H = build_hamiltonian(power_kernel, 2, exact=True)
        P = H.layer(4)
        S, dZ = homological_split(P)
        assert all(energy(J) == 0 for J in dZ)
        assert len(poisson_bracket(quadratic_part(2, exact=True), S) - (P - dZ)) == 0


class TestLieTransform:

    def setup_method(self):
        self.spec = KernelSpec.power(1)
        self.H = build_hamiltonian(self.spec, 2)
        self.S, _ = homological_split(self.H.layer(4))

    def test_zero_generator(self):
        transformed, remainder = lie_transform(self.H, PolyHamiltonian.zero(), 6)
        assert transformed == self.H
        assert len(remainder) == 0

    def test_preconditions(self):
        with pytest.raises(PreconditionError):
            lie_transform(self.H, self.S, 2)
        with pytest.raises(PreconditionError):
            lie_transform(self.H, quadratic_part(2), 6)

    def test_degree_bookkeeping(self):
        transformed, remainder = lie_transform(self.H, self.S, 6)
        assert max(transformed.degrees()) <= 6
        assert min(remainder.degrees()) > 6
        assert all(len(J) % 2 == 0 for J in remainder)

    def test_matches_numeric_flow(self, rng):
        transformed, remainder = lie_transform(self.H, self.S, 8)
        for _ in range(5):
            u = random_state(rng, 2, 0.01)
            lhs = self.H.evaluate(flow(self.S, u, -1.0))
            rhs = (transformed + remainder).evaluate(u)
            assert abs(lhs - rhs) <= 1e-8 * abs(lhs)


class TestResonantNormalize:

    def setup_method(self):
        self.spec = KernelSpec.power(1)
        self.f = WeightFunction.gevrey(0.5)
        self.p = NormParams(2.0, 1.0, 0.01)

    def test_no_nonresonant_terms(self):
        K2 = action_quartic(self.spec, 2)
        nf = resonant_normalize(quadratic_part(2) + K2, 3, self.p, self.f)
        assert all(len(S) == 0 for S in nf.generators)
        assert nf.Z == K2
        assert len(nf.R) == 0

    def test_one_step_matches_lie_transform(self):
        H = build_hamiltonian(self.spec, 2)
        nf = resonant_normalize(H, 2, self.p, self.f)
        transformed, remainder = lie_transform(H, nf.generators[0], 4)
        assert nf.hamiltonian().allclose(transformed + remainder, atol=1e-12)

    def test_normal_form_support(self):
        nf = resonant_normalize(build_hamiltonian(self.spec, 2), 3, self.p, self.f)
        assert len(nf.steps) == 2
        assert all(energy(J) == 0 for J in nf.Z)
        assert poisson_bracket(nf.H0, nf.Z).coefficient_sup() <= 1e-12
        assert all(is_action_type(J) for J in nf.Z.layer(4))
        assert nf.Z.layer(4).allclose(action_quartic(self.spec, 2), atol=1e-12)

    def test_step_ledger(self, tmp_path):
        nf = resonant_normalize(build_hamiltonian(self.spec, 2), 3, self.p, self.f)
        for record in nf.steps:
            assert record.radius == pytest.approx(step_radius(self.p.r, 3, record.step))
            assert record.norm_perturbation <= record.bound_perturbation
            assert record.norm_normal_form <= record.bound_normal_form
        assert nf.steps[0].bound_perturbation == pytest.approx(perturbation_bound(1.0, 0.01, 3, 1))
        nf.write_step_log(tmp_path / "steps.json")
        nf.write_step_table(tmp_path / "steps.csv")
        assert len(json.loads((tmp_path / "steps.json").read_text())) == 2
        assert list(nf.step_frame()['step']) == [1, 2]

    def test_transform_round_trip(self, rng):
        nf = resonant_normalize(build_hamiltonian(self.spec, 2), 3, self.p, self.f)
        u = random_state(rng, 2, 0.01)
        back = nf.inverse_transform(nf.transform(u))
        assert np.max(np.abs(back.amplitudes - u.amplitudes)) <= 1e-10
        assert nf.normalized_actions(u).shape == (5,)

    def test_smallness_gate(self):
        assert smallness_gate(1.0, 0.1, 2) == pytest.approx(0.24)
        with pytest.raises(SmallnessViolated) as info:
            resonant_normalize(build_hamiltonian(self.spec, 2), 4, NormParams(2.0, 1.0, 0.5), self.f)
        assert info.value.exit_code == 3

    def test_scale_and_degree_preconditions(self):
        H = build_hamiltonian(self.spec, 2)
        with pytest.raises(ScaleError):
            resonant_normalize(H, 3, NormParams(1.0, 1.0, 0.01), self.f)
        with pytest.raises(PreconditionError):
            resonant_normalize(H, 1, self.p, self.f)

    @pytest.mark.slow
    def test_exact_tier(self):
        nf = resonant_normalize(build_hamiltonian(self.spec, 2, exact=True), 3, self.p, self.f)
        assert nf.Z.exact
        assert len(poisson_bracket(nf.H0, nf.Z)) == 0
        assert nf.Z.layer(4) == action_quartic(self.spec, 2, exact=True)

    @pytest.mark.slow
    def test_three_modes_degree_four(self):
        nf = resonant_normalize(build_hamiltonian(self.spec, 3), 4, self.p, self.f)
        assert len(nf.steps) == 3
        assert all(energy(J) == 0 for J in nf.Z)
