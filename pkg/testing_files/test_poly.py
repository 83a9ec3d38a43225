"""
Polynomial Hamiltonians: bracket algebra, evaluation, flows and the dump format
"""

import numpy as np
import pytest
import sympy

from conftest import random_state
import nekhoroshev_lab.poly as poly
from nekhoroshev_lab.errors import DomainError, PreconditionError, ScaleError
from nekhoroshev_lab.kernel import KernelSpec
from nekhoroshev_lab.lattice import NormParams, WeightFunction, energy
from nekhoroshev_lab.poly import (PolyHamiltonian, action_quartic, bracket_extended, build_hamiltonian, dump_poly,
                                  exact_to_complex,
                                  flow, high_vanishing_order, parse_poly, poisson_bracket, poisson_bracket_split,
                                  quadratic_part, quartic_quadruple_sum, truncation_tail_bound, vector_field)


def _exact(terms):
    return PolyHamiltonian(terms, exact=True)


class TestBracketAlgebra:

    def setup_method(self):
        self.A = _exact({((1, 1), (-1, 1), (0, -1), (0, -1)): 1, ((1, 1), (1, -1)): 2})
        self.B = _exact({((2, 1), (1, -1), (1, -1)): 1, ((0, 1), (0, -1)): -1})
        self.C = _exact({((0, 1), (0, 1), (1, -1), (-1, -1)): 1, ((1, 1), (1, -1)): 3,
                         ((2, 1), (-2, 1), (0, -1), (0, -1)): sympy.Rational(1, 2)})

    def test_quadratic_part_acts_by_energy(self):
        H0 = quadratic_part(3, exact=True)
        J = ((1, 1), (2, 1), (0, -1), (3, -1))
        u_J = PolyHamiltonian.monomial(J, 1, exact=True)
        expected = PolyHamiltonian.monomial(J, sympy.I * energy(J), exact=True)
        assert poisson_bracket(H0, u_J) == expected

    def test_antisymmetry(self):
        total = poisson_bracket(self.A, self.B) + poisson_bracket(self.B, self.A)
        assert len(total) == 0

    def test_jacobi_identity(self):
        total = (poisson_bracket(self.A, poisson_bracket(self.B, self.C))
                 + poisson_bracket(self.B, poisson_bracket(self.C, self.A))
                 + poisson_bracket(self.C, poisson_bracket(self.A, self.B)))
        assert len(total) == 0

    def test_split_recombines(self):
        low, high = poisson_bracket_split(self.A, self.C, degree_cut=4)
        assert all(len(J) <= 4 for J in low)
        assert all(len(J) > 4 for J in high)
        assert low + high == poisson_bracket(self.A, self.C)

    def test_bracket_matches_gradient_oracle(self):
        rng = np.random.default_rng(1)
        up = rng.normal(size=5) + 1j * rng.normal(size=5)
        um = rng.normal(size=5) + 1j * rng.normal(size=5)
        term = poisson_bracket(self.A, self.C).evaluate_extended(up, um)
        assert term == pytest.approx(bracket_extended(self.A, self.C, up, um), rel=1e-12)

    def test_momentum_violation(self):
        with pytest.raises(DomainError):
            PolyHamiltonian({((1, 1), (0, -1)): 1})

    @pytest.mark.parametrize("threads", [2, 3, 8])
    def test_threaded_bracket_matches_sequential(self, threads, monkeypatch):
        sequential = poisson_bracket(self.A, self.C)
        double = poisson_bracket(build_hamiltonian(KernelSpec.power(1), 2), self.A.to_double())
        monkeypatch.setattr(poly, "THREADS", threads)
        assert poisson_bracket(self.A, self.C) == sequential
        low, high = poisson_bracket_split(self.A, self.C, degree_cut=4)
        assert low + high == sequential
        assert poisson_bracket(build_hamiltonian(KernelSpec.power(1), 2), self.A.to_double()).allclose(double)


class TestHamiltonian:

    def setup_method(self):
        self.rng = np.random.default_rng(2)
        self.spec = KernelSpec.power(1)

    def test_exact_and_double_builds_agree(self):
        exact = build_hamiltonian(self.spec, 2, exact=True)
        double = build_hamiltonian(self.spec, 2)
        assert exact.to_double().allclose(double)
        assert exact.is_real()
        assert exact.is_momentum_conserving()

    def test_evaluation_matches_quadruple_sum(self):
        H = build_hamiltonian(self.spec, 2)
        u = random_state(self.rng, 2, 0.3)
        quadratic = float(np.sum(u.modes ** 2 * u.actions))
        assert H.evaluate(u) == pytest.approx(quadratic + quartic_quadruple_sum(self.spec, u), rel=1e-12)

    def test_quadratic_field(self):
        u = random_state(self.rng, 3)
        X = vector_field(quadratic_part(3), u)
        assert np.allclose(X.amplitudes, -1j * u.modes ** 2 * u.amplitudes)

    def test_action_quartic_layer_of_power_law(self):
        K2 = action_quartic(self.spec, 2, exact=True)
        # K0 = 0 for the power law, so |u_a|^4 terms vanish
        assert not K2.coefficient(((1, 1), (1, 1), (1, -1), (1, -1)))
        assert exact_to_complex(K2.coefficient(((0, 1), (2, 1), (0, -1), (2, -1)))) == 0.5

    def test_flow_conserves_energy_and_mass(self):
        H = build_hamiltonian(KernelSpec.exponential(), 2)
        u = random_state(self.rng, 2, 0.1)
        v = flow(H, u, 0.5)
        assert H.evaluate(v).real == pytest.approx(H.evaluate(u).real, rel=1e-8)
        assert np.sum(v.actions) == pytest.approx(np.sum(u.actions), rel=1e-8)

    def test_flow_backwards_returns(self):
        H = build_hamiltonian(self.spec, 2)
        u = random_state(self.rng, 2, 0.1)
        back = flow(H, flow(H, u, 0.3), -0.3)
        assert np.allclose(back.amplitudes, u.amplitudes, atol=1e-8)


class TestDumpFormat:

    def test_exact_round_trip(self):
        H = build_hamiltonian(KernelSpec.power(1), 2, exact=True)
        assert parse_poly(dump_poly(H)) == H

    def test_double_round_trip(self):
        H = build_hamiltonian(KernelSpec.exponential(), 2)
        back = parse_poly(dump_poly(H))
        assert not back.exact
        assert back.allclose(H, atol=0.0)

    def test_dump_is_sorted_by_degree(self):
        lines = dump_poly(build_hamiltonian(KernelSpec.power(1), 1)).splitlines()[1:]
        lengths = [len(line.partition(":")[0].split()) for line in lines]
        assert lengths == sorted(lengths)


class TestTruncation:

    def setup_method(self):
        self.f = WeightFunction.gevrey(0.5)

    def test_high_vanishing_order(self):
        P = PolyHamiltonian({((3, 1), (-3, 1), (0, -1), (0, -1)): 1.0})
        assert high_vanishing_order(P, 2) == 2
        assert high_vanishing_order(PolyHamiltonian.zero(), 2) == float("inf")

    def test_tail_bound_needs_order_three(self):
        P = PolyHamiltonian({((3, 1), (-3, 1), (0, -1), (0, -1)): 1.0})
        with pytest.raises(PreconditionError):
            truncation_tail_bound(P, NormParams(2.0, 1.0, 0.1), self.f, 2)

    def test_tail_bound_needs_scale_gap(self):
        P = PolyHamiltonian({((3, 1), (-3, 1), (3, -1), (-3, -1)): 1.0})
        with pytest.raises(ScaleError):
            truncation_tail_bound(P, NormParams(1.0, 1.0, 0.1), self.f, 2)

    def test_tail_bound_decays_with_the_cutoff(self):
        P = PolyHamiltonian({((5, 1), (-5, 1), (5, -1), (-5, -1)): 1.0})
        p = NormParams(2.0, 1.0, 0.1)
        assert truncation_tail_bound(P, p, self.f, 4) < truncation_tail_bound(P, p, self.f, 1)
