"""
Rational Normal Form - Normal-Form Laboratory
Frequency denominators, rational term algebra, the integrable iteration and its runtime estimate checks
"""

import json
import math
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import solve_ivp

from .config import LEDGER, THREADS
from .errors import (DomainError, DomainExit, HBudgetExceeded, NoConvergence, NonResonantDomainViolation,
                     PreconditionError, ScaleError, SmallnessViolated)
from .kernel import (FrequencyConvention, KernelSpec, NonResonanceParams, frequency_matrix,
                     nonresonance_margin)
from .lattice import (FourierState, MultiIndex, NormParams, WeightFunction, _sort_key, energy,
                      reduce_pairs, sample_ball_amplitudes, weight_vector, weighted_norm)
from .logging_setup import get_logger
from .poly import (PolyHamiltonian, _amplitude_scale, _exclusive_prod, _MonomialTable, _without, action_quartic,
                   truncate_modes)

log = get_logger("rational_nf")

HAMILTONIAN = FrequencyConvention.HAMILTONIAN
PRUNE_RELATIVE = 1e-14

DenominatorKey = Tuple[Tuple[int, int], ...]
TermKey = Tuple[MultiIndex, Tuple[DenominatorKey, ...]]


def denominator_key(J: Sequence[Tuple[int, int]]) -> Tuple[DenominatorKey, int]:
    """Reduced, sign-normalized frequency argument of J and the sign with omega_J = sign * omega_key"""
    reduced = reduce_pairs(J)
    if not reduced:
        raise DomainError("action-type multi-index has no frequency denominator", {'J': list(J)})
    if reduced[0][1] < 0:
        return tuple((j, -s) for j, s in reduced), -1
    return tuple(reduced), 1


def _format_entries(entries: Sequence[Tuple[int, int]]) -> str:
    return " ".join(f"{'+' if s > 0 else '-'}{j}" for j, s in entries)


def _parse_entries(text: str) -> DenominatorKey:
    out = []
    for token in text.split():
        out.append((int(token[1:]), 1 if token[0] == "+" else -1))
    return tuple(out)


@dataclass(frozen=True)
class RationalTerm:
    """coeff * u_numerator / prod_alpha omega_{denoms[alpha]}(u)"""
    coeff: complex
    numerator: MultiIndex
    denoms: Tuple[DenominatorKey, ...] = ()

    @property
    def degree(self) -> int:
        return len(self.numerator) - 2 * len(self.denoms)

    @property
    def order(self) -> int:
        """q = #numerator / 2 - #denominators"""
        return len(self.numerator) // 2 - len(self.denoms)

    @property
    def h(self) -> int:
        return max((len(dk) for dk in self.denoms), default=0)

    def format(self) -> str:
        c = complex(self.coeff)
        dens = " ; ".join(_format_entries(dk) for dk in self.denoms)
        return f"{c.real + 0.0:.17g} {c.imag + 0.0:.17g} | {self.numerator.format()} | {dens}".rstrip()


# ---------------------------------------------------------------------------
# Compiled evaluation


class _RationalTable(_MonomialTable):
    """Numerator exponents plus padded denominator indices; the padding row has omega = 1 and no gradient"""

    def __init__(self, keys: Sequence[TermKey], coeffs: Sequence[complex], M: int, W: np.ndarray):
        super().__init__([num for num, _ in keys], coeffs, M)
        n = 2 * M + 1
        den_keys = sorted({dk for _, dens in keys for dk in dens})
        position = {dk: i for i, dk in enumerate(den_keys)}
        C = np.zeros((len(den_keys), n))
        for i, dk in enumerate(den_keys):
            for j, s in dk:
                C[i, j + M] += s
        self.G = np.vstack([C @ W, np.zeros((1, n))])
        width = max((len(dens) for _, dens in keys), default=0)
        self.D = np.full((len(keys), max(width, 1)), len(den_keys), dtype=np.int64)
        for t, (_, dens) in enumerate(keys):
            for a, dk in enumerate(dens):
                self.D[t, a] = position[dk]
        self.n_denominators = len(den_keys)

    def omegas(self, u: np.ndarray) -> np.ndarray:
        """Frequencies of every distinct denominator, padding entry last"""
        omega = self.G @ (np.abs(u) ** 2)
        omega[-1] = 1.0
        return omega

    def _denominator_parts(self, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        inv = 1.0 / self.omegas(u)[self.D]
        return inv.prod(axis=1), (self.G[self.D] * inv[..., None]).sum(axis=1)

    def evaluate_physical(self, u: np.ndarray) -> complex:
        if not self.coeffs.size:
            return 0j
        F, G, _, _ = self.factors(u, np.conj(u))
        inv_den, _ = self._denominator_parts(u)
        return complex(np.sum(self.coeffs * F.prod(axis=1) * G.prod(axis=1) * inv_den))

    def gradients(self, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(dQ/du_j, dQ/d conj(u_j)) at the physical state"""
        n = self._cols.size
        if not self.coeffs.size:
            return np.zeros(n, dtype=complex), np.zeros(n, dtype=complex)
        um = np.conj(u)
        F, G, dF, dG = self.factors(u, um)
        Fp, Gp = F.prod(axis=1), G.prod(axis=1)
        N = Fp * Gp
        inv_den, sumgrad = self._denominator_parts(u)
        base = (self.coeffs * inv_den)[:, None]
        gp = (base * (_exclusive_prod(F) * dF * Gp[:, None] - N[:, None] * sumgrad * um[None, :])).sum(axis=0)
        gm = (base * (_exclusive_prod(G) * dG * Fp[:, None] - N[:, None] * sumgrad * u[None, :])).sum(axis=0)
        return gp, gm

    def field(self, u: np.ndarray) -> np.ndarray:
        return -1j * self.gradients(u)[1]


# ---------------------------------------------------------------------------
# Rational Hamiltonian


class RationalHamiltonian:
    """Sum of rational terms on modes |j| <= M; frequencies follow the Hamiltonian convention"""

    def __init__(self, spec: KernelSpec, M: int, h_budget: int, terms: Optional[Dict[TermKey, complex]] = None):
        self.spec = spec
        self.M = M
        self.h_budget = h_budget
        self._terms: Dict[TermKey, complex] = {k: complex(c) for k, c in (terms or {}).items() if c != 0}
        self._compiled: Optional[_RationalTable] = None

    @classmethod
    def from_poly(cls, P: PolyHamiltonian, spec: KernelSpec, M: int, h_budget: int) -> "RationalHamiltonian":
        if P.max_mode() > M:
            raise DomainError("polynomial has modes beyond the rational cutoff", {'M': M, 'max_mode': P.max_mode()})
        return cls(spec, M, h_budget, {(J, ()): complex(c) for J, c in P.to_double().items()})

    def _like(self, terms: Dict[TermKey, complex]) -> "RationalHamiltonian":
        return RationalHamiltonian(self.spec, self.M, self.h_budget, terms)

    @property
    def terms(self) -> List[RationalTerm]:
        return [RationalTerm(c, num, dens) for (num, dens), c in self._terms.items()]

    @property
    def W(self) -> np.ndarray:
        return frequency_matrix(self.spec, self.M, HAMILTONIAN)

    def items(self):
        return self._terms.items()

    def __len__(self) -> int:
        return len(self._terms)

    def __bool__(self) -> bool:
        return bool(self._terms)

    def __repr__(self) -> str:
        return f"RationalHamiltonian({len(self)} terms, M={self.M}, degrees={self.degrees()}, h={self.h_max()})"

    def __add__(self, other: "RationalHamiltonian") -> "RationalHamiltonian":
        out = dict(self._terms)
        for k, c in other.items():
            out[k] = out.get(k, 0j) + c
        return self._like(out)

    def __neg__(self) -> "RationalHamiltonian":
        return self._like({k: -c for k, c in self.items()})

    def __sub__(self, other: "RationalHamiltonian") -> "RationalHamiltonian":
        return self + (-other)

    def __mul__(self, scalar) -> "RationalHamiltonian":
        return self._like({k: c * scalar for k, c in self.items()})

    __rmul__ = __mul__

    def filter(self, keep: Callable[[TermKey, complex], bool]) -> "RationalHamiltonian":
        return self._like({k: c for k, c in self.items() if keep(k, c)})

    def degrees(self) -> List[int]:
        return sorted({len(num) - 2 * len(dens) for num, dens in self._terms})

    def layer(self, degree: int) -> "RationalHamiltonian":
        return self.filter(lambda k, c: len(k[0]) - 2 * len(k[1]) == degree)

    def h_max(self) -> int:
        return max((len(dk) for _, dens in self._terms for dk in dens), default=0)

    def is_polynomial(self) -> bool:
        return all(not dens for _, dens in self._terms)

    def to_poly(self) -> PolyHamiltonian:
        if not self.is_polynomial():
            raise DomainError("rational Hamiltonian has frequency denominators")
        return PolyHamiltonian._trusted({num: c for (num, _), c in self.items()}, False)

    def coefficient_sup(self) -> float:
        return max((abs(c) for c in self._terms.values()), default=0.0)

    def prune(self, scale: float) -> "RationalHamiltonian":
        floor = PRUNE_RELATIVE * scale
        return self.filter(lambda k, c: abs(c) > floor)

    # evaluation

    def _table(self) -> _RationalTable:
        if self._compiled is None:
            self._compiled = _RationalTable(list(self._terms), list(self._terms.values()), self.M, self.W)
        return self._compiled

    def _amplitudes(self, u: FourierState) -> np.ndarray:
        if u.M != self.M:
            u = u.pad_to(self.M)
        return u.amplitudes

    def evaluate(self, u: FourierState) -> complex:
        return self._table().evaluate_physical(self._amplitudes(u))

    def gradients(self, u: FourierState) -> Tuple[np.ndarray, np.ndarray]:
        return self._table().gradients(self._amplitudes(u))

    def field(self, u: FourierState) -> np.ndarray:
        return self._table().field(self._amplitudes(u))

    def min_abs_denominator(self, u: FourierState) -> float:
        table = self._table()
        if not table.n_denominators:
            return math.inf
        return float(np.abs(table.omegas(self._amplitudes(u))[:-1]).min())

    def dump(self) -> str:
        ordered = sorted(self.terms, key=lambda t: (t.degree, tuple(_sort_key(e) for e in t.numerator), t.denoms))
        return "".join(t.format() + "\n" for t in ordered)


def parse_rational(text: str, spec: KernelSpec, M: int, h_budget: int) -> RationalHamiltonian:
    """Inverse of RationalHamiltonian.dump"""
    terms: Dict[TermKey, complex] = {}
    for raw in text.splitlines():
        if not raw.strip():
            continue
        value, numerator, dens = (part.strip() for part in (raw.split("|") + [""])[:3])
        re_text, im_text = value.split()
        denoms = tuple(_parse_entries(d) for d in dens.split(";") if d.strip())
        key = (MultiIndex.parse(numerator), tuple(sorted(denoms)))
        terms[key] = terms.get(key, 0j) + complex(float(re_text), float(im_text))
    return RationalHamiltonian(spec, M, h_budget, terms)


# ---------------------------------------------------------------------------
# Non-resonant domain


@dataclass(frozen=True)
class NonResonantDomain:
    """D_gamma^{2d,M}: states with |omega_c(u)| > gamma N_s(u)^2 for every admissible charge c"""
    spec: KernelSpec
    nr: NonResonanceParams
    p: NormParams
    f: WeightFunction

    def norm(self, u: FourierState) -> float:
        return weighted_norm(u, self.p, self.f)

    def margin(self, u: FourierState, gamma: Optional[float] = None) -> float:
        nr = self.nr if gamma is None else NonResonanceParams(gamma, self.nr.M, self.nr.d)
        return nonresonance_margin(self.spec, u, nr, self.p, self.f, convention=HAMILTONIAN)

    def contains(self, u: FourierState, gamma: Optional[float] = None) -> bool:
        return self.margin(u, gamma) > 0.0

    def with_gamma(self, gamma: float) -> "NonResonantDomain":
        return NonResonantDomain(self.spec, NonResonanceParams(gamma, self.nr.M, self.nr.d), self.p, self.f)


def sample_nonresonant_states(domain: NonResonantDomain, r: float, n: int, rng: np.random.Generator,
                              gamma: Optional[float] = None, max_batches: int = 50) -> List[FourierState]:
    """Up to n uniform states of the ball B(r) lying in the domain (rejection sampling)"""
    M = domain.nr.M
    found: List[FourierState] = []
    for _ in range(max_batches):
        batch = sample_ball_amplitudes(M, domain.p.s, domain.f, r, max(4 * n, 16), rng)
        for a in batch:
            u = FourierState(a)
            if domain.contains(u, gamma):
                found.append(u)
                if len(found) == n:
                    return found
    if len(found) < n:
        log.warning(f"only {len(found)} of {n} non-resonant states found at r={r}")
    return found


def rational_vector_field(Q: RationalHamiltonian, u: FourierState, domain: NonResonantDomain,
                          check: bool = True) -> FourierState:
    """(X_Q)_(j,+) = -i dQ/d conj(u_j) by the quotient rule"""
    if check and Q.h_max():
        threshold = domain.nr.gamma * domain.norm(u) ** 2
        smallest = Q.min_abs_denominator(u)
        if smallest <= threshold:
            raise NonResonantDomainViolation("frequency denominator below the non-resonance threshold",
                                             {'min_abs_omega': smallest, 'threshold': threshold})
    return FourierState(Q.field(u))


# ---------------------------------------------------------------------------
# Term algebra


def _check_compatible(A: RationalHamiltonian, B: RationalHamiltonian) -> None:
    if A.M != B.M or A.spec != B.spec:
        raise DomainError("rational Hamiltonians live on different mode sets or kernels",
                          {'M': (A.M, B.M)})


def _term_degree(key: TermKey) -> int:
    return len(key[0]) - 2 * len(key[1])


def rational_bracket_split(A: RationalHamiltonian, B: RationalHamiltonian, degree_cut: Optional[int] = None
                           ) -> Tuple[RationalHamiltonian, List[Tuple[RationalHamiltonian, RationalHamiltonian]]]:
    """
    {A,B} for term pairs whose output degree stays within degree_cut, plus the
    (A-part, B-part) pairs whose bracket lies entirely above it.
    Contributions: numerator contractions; numerator of one side against each
    denominator of the other (one more denominator); denominator pairs cancel.
    """
    _check_compatible(A, B)
    M, W = A.M, A.W
    cut = math.inf if degree_cut is None else degree_cut
    cache: Dict[Tuple, float] = {}

    def pairing(charge: Tuple[Tuple[int, int], ...], dk: DenominatorKey) -> float:
        value = cache.get((charge, dk))
        if value is None:
            value = float(sum(c * s * W[i + M, j + M] for i, c in charge for j, s in dk))
            cache[(charge, dk)] = value
        return value

    b_terms = [(num, dens, b, _term_degree((num, dens)), tuple(sorted(num.charge().items())))
               for (num, dens), b in B.items()]
    index: Dict[Tuple[int, int], List] = defaultdict(list)
    for num, dens, b, deg_b, _ in b_terms:
        for entry, nB in Counter(num).items():
            index[entry].append((nB, b, _without(num, entry), dens, deg_b))

    out: Dict[TermKey, complex] = defaultdict(complex)
    overflow_a: Dict[int, set] = defaultdict(set)
    scale = A.coefficient_sup() * B.coefficient_sup()
    for (num_a, dens_a), a in A.items():
        deg_a = _term_degree((num_a, dens_a))
        charge_a = tuple(sorted(num_a.charge().items()))
        for (j, s), nA in Counter(num_a).items():
            rest_a = _without(num_a, (j, s))
            for nB, b, rest_b, dens_b, deg_b in index.get((j, -s), ()):
                if deg_a + deg_b - 2 > cut:
                    continue
                key = (MultiIndex._from_sorted(sorted(rest_a + rest_b, key=_sort_key)),
                       tuple(sorted(dens_a + dens_b)))
                out[key] += -1j * s * nA * nB * a * b
        for num_b, dens_b, b, deg_b, charge_b in b_terms:
            if deg_a + deg_b - 2 > cut:
                overflow_a[deg_a].add(deg_b)
                continue
            extra = []
            for beta in dens_b:
                w = pairing(charge_a, beta)
                if w:
                    extra.append((beta, 1j * a * b * w))
            for alpha in dens_a:
                w = pairing(charge_b, alpha)
                if w:
                    extra.append((alpha, -1j * a * b * w))
            if not extra:
                continue
            union = MultiIndex._from_sorted(sorted(num_a + num_b, key=_sort_key))
            base = dens_a + dens_b
            for dk, value in extra:
                out[(union, tuple(sorted(base + (dk,))))] += value
    low = A._like(dict(out)).prune(scale) if out else A._like({})
    overflow = []
    for deg_a, degs_b in sorted(overflow_a.items()):
        part_a = A.layer(deg_a)
        part_b = B.filter(lambda k, c: _term_degree(k) in degs_b)
        overflow.append((part_a, part_b))
    return low, overflow


def rational_bracket(A: RationalHamiltonian, B: RationalHamiltonian) -> RationalHamiltonian:
    return rational_bracket_split(A, B, None)[0]


def bracket_value(A: RationalHamiltonian, B: RationalHamiltonian, u: FourierState) -> complex:
    """{A,B}(u) from the two gradients"""
    gpA, gmA = A.gradients(u)
    gpB, gmB = B.gradients(u)
    return complex(-1j * np.sum(gpA * gmB - gmA * gpB))


def _directional(field_fn: Callable[[np.ndarray], np.ndarray], a: np.ndarray, v: np.ndarray,
                 step: float) -> np.ndarray:
    scale = np.linalg.norm(v)
    if scale == 0:
        return np.zeros_like(a)
    eps = step * max(np.linalg.norm(a), 1e-300) / scale
    return (field_fn(a + eps * v) - field_fn(a - eps * v)) / (2.0 * eps)


def rational_bracket_numeric(A: RationalHamiltonian, B: RationalHamiltonian, u: FourierState,
                             step: Optional[float] = None) -> np.ndarray:
    """X_{A,B} = DX_A X_B - DX_B X_A by central differences along the fields"""
    step = step or LEDGER.fd_step
    a = A._amplitudes(u)
    XA, XB = A._table().field(a), B._table().field(a)
    return _directional(A._table().field, a, XB, step) - _directional(B._table().field, a, XA, step)


@dataclass
class LazyRemainder:
    """Upsilon: explicit high terms plus weighted brackets evaluated numerically on demand"""
    static: RationalHamiltonian
    pairs: List[Tuple[float, RationalHamiltonian, RationalHamiltonian]] = field(default_factory=list)

    def extend(self, weight: float, pairs: Sequence[Tuple[RationalHamiltonian, RationalHamiltonian]]) -> None:
        for A, B in pairs:
            if A and B:
                self.pairs.append((weight, A, B))

    def __len__(self) -> int:
        return len(self.static) + len(self.pairs)

    def is_zero(self) -> bool:
        return not self.static and not self.pairs

    def value(self, u: FourierState) -> complex:
        return self.static.evaluate(u) + sum(w * bracket_value(A, B, u) for w, A, B in self.pairs)

    def field(self, u: FourierState) -> np.ndarray:
        out = self.static.field(u)
        for w, A, B in self.pairs:
            out = out + w * rational_bracket_numeric(A, B, u)
        return out


def ad_series_rational(S: RationalHamiltonian, X: RationalHamiltonian, degree_cut: int, shift: int = 0
                       ) -> Tuple[RationalHamiltonian, List[Tuple[float, List]]]:
    """sum_{l>=1} ad_S^l X / (l+shift)!; overflow returned as (weight, pairs) for the lazy remainder"""
    total = S._like({})
    overflow: List[Tuple[float, List]] = []
    current, l = X, 0
    while current and S:
        l += 1
        low, pairs = rational_bracket_split(S, current, degree_cut)
        weight = 1.0 / math.factorial(l + shift)
        total = total + low * weight
        if pairs:
            overflow.append((weight, pairs))
        current = low
    return total, overflow


# ---------------------------------------------------------------------------
# Homological equation


def _identically_zero(Z: RationalHamiltonian, dk: DenominatorKey) -> bool:
    W = Z.W
    g = sum(s * W[j + Z.M] for j, s in dk)
    return float(np.abs(g).max()) <= 1e-12 * float(np.abs(W).max())


def split_rational(Z: RationalHamiltonian) -> Tuple[RationalHamiltonian, RationalHamiltonian]:
    """S = sum (Z_term / i) u_J / (prod omega * omega_J) over non-action numerators; dK the action part"""
    S: Dict[TermKey, complex] = defaultdict(complex)
    dK: Dict[TermKey, complex] = {}
    for (num, dens), c in Z.items():
        if energy(num) != 0:
            raise PreconditionError("rational homological equation needs resonant numerators",
                                    {'numerator': num.format()})
        if not num.charge():
            dK[(num, dens)] = c
            continue
        dk, sign = denominator_key(num)
        if len(dk) > Z.h_budget:
            raise HBudgetExceeded("denominator longer than the h budget",
                                  {'length': len(dk), 'h_budget': Z.h_budget, 'numerator': num.format()})
        if _identically_zero(Z, dk):
            raise PreconditionError("frequency of a non-action numerator vanishes identically",
                                    {'numerator': num.format()})
        S[(num, tuple(sorted(dens + (dk,))))] += -1j * c * sign
    return Z._like(dict(S)), Z._like(dK)


def rational_homological_split(Z: PolyHamiltonian, spec: KernelSpec, M: int,
                               h_budget: Optional[int] = None) -> Tuple[RationalHamiltonian, PolyHamiltonian]:
    """Solves {S, K2} + Z_nonaction = 0 with action-type terms routed to dK"""
    h_budget = h_budget or max((len(J) for J in Z), default=2)
    S, dK = split_rational(RationalHamiltonian.from_poly(Z, spec, M, h_budget))
    return S, dK.to_poly()


def homological_residual(K2: RationalHamiltonian, S: RationalHamiltonian, Z_nonaction: RationalHamiltonian,
                         u: FourierState) -> float:
    """||X_{K2,S} - X_Z|| / ||X_Z|| at u, bracket field by central differences"""
    lhs = rational_bracket_numeric(K2, S, u)
    target = Z_nonaction.field(u)
    denom = np.linalg.norm(target)
    return float(np.linalg.norm(lhs - target) / denom) if denom > 0 else float(np.linalg.norm(lhs))


# ---------------------------------------------------------------------------
# Flow and estimate checks


def gamma_shrink(gamma: float, rho: float, h: int, C_K: float = 1.0) -> float:
    """gamma' = gamma / (1+rho)^2 - 2 h C_K rho / (1-rho)"""
    if rho >= 1.0:
        return -math.inf
    return gamma / (1.0 + rho) ** 2 - 2.0 * h * C_K * rho / (1.0 - rho)


def flow_map(S: RationalHamiltonian, u: FourierState, t: float, domain: NonResonantDomain,
             gamma_floor: Optional[float] = None, rho: Optional[float] = None) -> FourierState:
    """
    Time-t map of X_S, stopped by DomainExit once the margin at gamma_floor
    (default: the domain's gamma) reaches zero. With rho, asserts ||Psi(u) - u|| <= rho ||u||.
    """
    u = u.pad_to(S.M) if u.M != S.M else u
    if t == 0 or not S:
        return u
    floor = domain.nr.gamma if gamma_floor is None else max(gamma_floor, 0.0)
    if domain.margin(u, floor) <= 0:
        raise NonResonantDomainViolation("flow started outside the non-resonant domain", {'gamma': floor})

    def leave(_, y):
        return domain.margin(FourierState(y), floor)

    leave.terminal = True
    leave.direction = -1
    table = S._table()
    sol = solve_ivp(lambda _, y: table.field(y), (0.0, float(t)), u.amplitudes, method="DOP853",
                    rtol=LEDGER.flow_rtol, atol=LEDGER.flow_atol * _amplitude_scale(u.amplitudes), events=leave)
    if sol.status == 1:
        exit_time = float(sol.t_events[0][0])
        raise DomainExit(f"flow left the non-resonant domain at t={exit_time:.6g}", exit_time, {'gamma': floor})
    if not sol.success:
        raise NoConvergence(f"rational flow failed: {sol.message}", {'t': t})
    out = FourierState(sol.y[:, -1])
    if rho is not None:
        moved = domain.norm(FourierState(out.amplitudes - u.amplitudes))
        if moved > rho * domain.norm(u):
            raise SmallnessViolated("flow is not rho-close to the identity",
                                    details={'moved': moved, 'allowed': rho * domain.norm(u)})
    return out


def sampled_rational_norm(Q: RationalHamiltonian, states: Sequence[FourierState], domain: NonResonantDomain) -> float:
    """max over states of N_s(X_Q(u)) / N_s(u); fields at the states evaluated on THREADS workers"""
    w = weight_vector(Q.M, domain.p.s, domain.f)

    def ratio(u: FourierState) -> float:
        norm_u = domain.norm(u)
        return float(np.sum(w * np.abs(Q.field(u)))) / norm_u if norm_u > 0 else 0.0

    if THREADS > 1 and len(states) > 1:
        with ThreadPoolExecutor(max_workers=THREADS) as pool:
            ratios = list(pool.map(ratio, states))
    else:
        ratios = [ratio(u) for u in states]
    return max(ratios, default=0.0)


def rational_certified_norm(Q: RationalHamiltonian, r: float, gamma: float) -> float:
    """Coefficient majorant: sum over (degree, #denominators) groups of max|c| r^{degree-2} gamma^{-#den}"""
    groups: Dict[Tuple[int, int], float] = {}
    for (num, dens), c in Q.items():
        key = (len(num) - 2 * len(dens), len(dens))
        groups[key] = max(groups.get(key, 0.0), abs(c))
    return float(sum(c * r ** (deg - 2) * gamma ** (-nd) for (deg, nd), c in groups.items()))


@dataclass
class CauchyReport:
    n_checked: int
    worst_ratio: float
    slack: float

    @property
    def passed(self) -> bool:
        return self.worst_ratio <= self.slack

    def to_dict(self) -> Dict[str, Any]:
        return {'n_checked': self.n_checked, 'worst_ratio': self.worst_ratio, 'slack': self.slack,
                'passed': self.passed}


def _unit_directions(M: int, s: float, f: WeightFunction, n: int, rng: np.random.Generator) -> np.ndarray:
    return sample_ball_amplitudes(M, s, f, 1.0, n, rng, surface=True)


def cauchy_estimate_check(Q: RationalHamiltonian, domain: NonResonantDomain, r: float, rho: float,
                          rng: np.random.Generator, n_states: int = 10, n_sphere: int = 64,
                          n_phases: int = 8) -> CauchyReport:
    """
    ||DX_Q(u)||_op <= (1/(rho N(u))) max_{N(u'-u) = rho N(u)} N(X_Q(u')) on sampled states;
    the operator norm is the max over weighted unit coordinate directions and phases.
    """
    M = Q.M
    w = weight_vector(M, domain.p.s, domain.f)
    table = Q._table()
    step = LEDGER.fd_step
    worst, checked = 0.0, 0
    for u in sample_nonresonant_states(domain, r, n_states, rng):
        a = u.amplitudes
        norm_u = domain.norm(u)
        lhs = 0.0
        for j in range(2 * M + 1):
            for phase in np.linspace(0.0, np.pi, n_phases, endpoint=False):
                h = np.zeros(2 * M + 1, dtype=complex)
                h[j] = np.exp(1j * phase) / w[j]
                lhs = max(lhs, float(np.sum(w * np.abs(_directional(table.field, a, h, step)))))
        sphere = a[None, :] + rho * norm_u * _unit_directions(M, domain.p.s, domain.f, n_sphere, rng)
        rhs = max(float(np.sum(w * np.abs(table.field(b)))) for b in sphere) / (rho * norm_u)
        if rhs > 0:
            worst = max(worst, lhs / rhs)
            checked += 1
    return CauchyReport(checked, worst, LEDGER.cauchy_slack)


@dataclass
class RationalLieReport:
    lhs_sampled: float
    rhs_sampled: float
    factor: float
    slack: float

    @property
    def passed(self) -> bool:
        return self.lhs_sampled <= self.slack * self.rhs_sampled

    def to_dict(self) -> Dict[str, Any]:
        return {'lhs_sampled': self.lhs_sampled, 'rhs_sampled': self.rhs_sampled, 'factor': self.factor,
                'slack': self.slack, 'passed': self.passed}


def lie_bracket_estimate_check(Q1: RationalHamiltonian, Q2: RationalHamiltonian, domain: NonResonantDomain,
                               r: float, rho: float, rng: np.random.Generator,
                               n_states: Optional[int] = None) -> RationalLieReport:
    """Sampled |{Q1,Q2}|_r against ((2+2rho)/rho) |Q1|_{r(1+rho)} |Q2|_{r(1+rho)}"""
    n_states = n_states or 20
    inner = sample_nonresonant_states(domain, r, n_states, rng)
    outer = sample_nonresonant_states(domain, r * (1.0 + rho), n_states, rng)
    w = weight_vector(Q1.M, domain.p.s, domain.f)
    lhs = 0.0
    for u in inner:
        lhs = max(lhs, float(np.sum(w * np.abs(rational_bracket_numeric(Q1, Q2, u)))) / domain.norm(u))
    factor = (2.0 + 2.0 * rho) / rho
    rhs = factor * sampled_rational_norm(Q1, outer, domain) * sampled_rational_norm(Q2, outer, domain)
    return RationalLieReport(lhs, rhs, factor, LEDGER.lie_slack)


def margin_histogram(domain: NonResonantDomain, r: float, n: int, rng: np.random.Generator,
                     bins: int = 20) -> Dict[str, Any]:
    """Histogram of the relative margin min|omega|/N_s^2 - gamma over uniform states of B(r)"""
    values = []
    for a in sample_ball_amplitudes(domain.nr.M, domain.p.s, domain.f, r, n, rng):
        u = FourierState(a)
        norm2 = domain.norm(u) ** 2
        if norm2 > 0:
            values.append(domain.margin(u) / norm2)
    values_arr = np.asarray(values)
    counts, edges = np.histogram(values_arr, bins=bins)
    return {'counts': counts.tolist(), 'edges': edges.tolist(),
            'fraction_nonresonant': float(np.mean(values_arr > 0)) if values_arr.size else 0.0,
            'n_samples': int(values_arr.size)}


# ---------------------------------------------------------------------------
# Iteration


@dataclass
class RationalStepRecord:
    step: int
    radius: float
    gamma_k: float
    rho: float
    gamma_shrunk: float
    n_generator: int
    n_integrable: int
    n_next: int
    n_lazy_pairs: int
    h_max: int
    norm_generator: float
    bound_generator: float
    norm_remaining: float
    bound_remaining: float
    max_coefficient: float
    homological_residual: Optional[float] = None
    sampled_generator: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def rational_step_radius(r: float, d: int, k: int) -> float:
    """r_k = 2r - (k-2) r / (d-2)"""
    return 2.0 * r - (k - 2) * r / (d - 2)


def rational_step_gamma(gamma: float, d: int, k: int) -> float:
    return gamma + (k - 2) * gamma / (d - 2)


def rational_step_rho(d: int, k: int) -> float:
    return 1.0 / (2 * d - k - 3)


def remaining_bound(r: float, gamma: float, d: int, k: int) -> float:
    """C2^k r^{2k} gamma^{4-2k} d^{2k-3}"""
    return LEDGER.C2 ** k * r ** (2 * k) * gamma ** (4 - 2 * k) * float(d) ** (2 * k - 3)


@dataclass
class RationalNormalFormResult:
    """H^M o Psi^{-1} = H0 + K + Upsilon, Psi = psi_{d-1} o ... o psi_2"""
    H0: PolyHamiltonian
    K: RationalHamiltonian
    upsilon: LazyRemainder
    generators: List[RationalHamiltonian]
    steps: List[RationalStepRecord]
    domain: NonResonantDomain
    d: int
    degree_cut: int
    Z: Optional[RationalHamiltonian] = None
    margins: Dict[str, Any] = field(default_factory=dict)
    gamma_floors: List[float] = field(default_factory=list)     # domain floor each generator's flow starts from

    @property
    def image_floors(self) -> List[float]:
        """Floor on the image of each step, max(gamma', 0)"""
        return [max(s.gamma_shrunk, 0.0) for s in self.steps]

    def _floors(self, override: Optional[float], floors: List[float]) -> List[float]:
        if override is not None:
            return [override] * len(self.generators)
        return floors if len(floors) == len(self.generators) else [0.0] * len(self.generators)

    def transform(self, u: FourierState, gamma_floor: Optional[float] = None) -> FourierState:
        """Psi(u); every flow is stopped at its step's floor unless gamma_floor overrides it"""
        for S, floor in zip(self.generators, self._floors(gamma_floor, self.gamma_floors)):
            u = flow_map(S, u, 1.0, self.domain, gamma_floor=floor)
        return u

    def inverse_transform(self, v: FourierState, gamma_floor: Optional[float] = None) -> FourierState:
        pairs = list(zip(self.generators, self._floors(gamma_floor, self.image_floors)))
        for S, floor in reversed(pairs):
            v = flow_map(S, v, -1.0, self.domain, gamma_floor=floor)
        return v

    def integrability_residual(self, u: FourierState) -> float:
        """max_J N(X_{K,|u_J|^2}) / N(X_K) at u"""
        base = float(np.linalg.norm(self.K.field(u)))
        worst = 0.0
        for j in range(-self.K.M, self.K.M + 1):
            action = RationalHamiltonian.from_poly(PolyHamiltonian.monomial(((j, 1), (j, -1))),
                                                   self.K.spec, self.K.M, self.K.h_budget)
            worst = max(worst, float(np.linalg.norm(rational_bracket_numeric(self.K, action, u))))
        return worst / base if base > 0 else worst

    def step_frame(self) -> pd.DataFrame:
        return pd.DataFrame([s.to_dict() for s in self.steps])

    def write_step_log(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            json.dump([s.to_dict() for s in self.steps], f, indent=2)

    def summary(self) -> Dict[str, Any]:
        return {
            'd': self.d,
            'degree_cut': self.degree_cut,
            'terms_K': len(self.K),
            'upsilon_static_terms': len(self.upsilon.static),
            'upsilon_lazy_pairs': len(self.upsilon.pairs),
            'generators': [len(S) for S in self.generators],
            'steps': [s.to_dict() for s in self.steps],
            'margins': self.margins,
            'gamma_floors': self.gamma_floors,
        }


def integrable_normalize(HM: PolyHamiltonian, d: int, p: NormParams, nr: NonResonanceParams, f: WeightFunction,
                         spec: KernelSpec, h_budget: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                         check_bounds: bool = True, n_residual_states: int = 5) -> RationalNormalFormResult:
    """
    Steps k = 2..d-1 on H^M = H0 + K2 + Z2: S_k solves {K2, S_k} + Z_k = dK_k, then
    Z_{k+1} collects ad^{l>=2} K2 / l!, ad^{l>=1} (K_k - K2) / l! and ad^{l>=1} Z_k / l!.
    """
    if d < 3:
        raise PreconditionError("integrable normal form needs d >= 3", {'d': d})
    if p.s <= p.s0:
        raise ScaleError("normal form needs s > s0", {'s': p.s, 's0': p.s0})
    gamma, r, M, C_K = nr.gamma, p.r, nr.M, spec.C_K
    if gamma <= 0:
        raise PreconditionError("integrable normal form needs gamma > 0", {'gamma': gamma})
    gate = r * r * d ** 3 / gamma
    if check_bounds and gate >= 1.0:
        raise SmallnessViolated(f"smallness gate r^2 d^3 / gamma = {gate:.3e} is not below 1", step=1,
                                details={'gate': gate})
    h_budget = h_budget or 2 * d
    cut = 2 * d
    domain = NonResonantDomain(spec, nr, p, f)

    HM = truncate_modes(HM, M).to_double()
    H0 = HM.layer(2)
    K2_poly = HM.layer(4)
    if not K2_poly.allclose(action_quartic(spec, M, HAMILTONIAN), atol=1e-12):
        raise PreconditionError("quartic layer is not the integrable quartic of the kernel")
    if any(energy(J) != 0 for J in HM if len(J) > 2):
        raise PreconditionError("H^M must be resonant-supported above the quadratic part")

    def lift(P: PolyHamiltonian) -> RationalHamiltonian:
        return RationalHamiltonian.from_poly(P, spec, M, h_budget)

    K2 = lift(K2_poly)
    Z = lift(HM.filter(lambda J, c: 6 <= len(J) <= cut))
    upsilon = LazyRemainder(static=lift(HM.filter(lambda J, c: len(J) > cut)))
    K_extra = K2._like({})
    generators: List[RationalHamiltonian] = []
    steps: List[RationalStepRecord] = []
    floors: List[float] = []
    floor = gamma
    log.info(f"integrable normal form: d={d}, M={M}, gamma={gamma}, {len(Z)} terms to normalize")

    for k in range(2, d):
        floors.append(floor)
        r_k = rational_step_radius(r, d, k)
        gamma_k = rational_step_gamma(gamma, d, k)
        rho_k = rational_step_rho(d, k)
        norm_Z = rational_certified_norm(Z, r_k, gamma_k)
        S, dK = split_rational(Z)
        Z_nonaction = Z - dK
        residual = None
        sampled = None
        if rng is not None and S:
            states = sample_nonresonant_states(domain, r, n_residual_states, rng, gamma=floor)
            if states:
                residual = max(homological_residual(K2, S, Z_nonaction, u) for u in states)
                sampled = sampled_rational_norm(S, states, domain)
        from_k2, over_k2 = ad_series_rational(S, -Z_nonaction, cut, shift=1)
        from_kx, over_kx = ad_series_rational(S, K_extra, cut)
        from_z, over_z = ad_series_rational(S, Z, cut)
        for weight, pairs in over_k2 + over_kx + over_z:
            upsilon.extend(weight, pairs)
        K_extra = K_extra + dK
        Z = from_k2 + from_kx + from_z
        generators.append(S)

        norm_S = rational_certified_norm(S, r_k, gamma_k)
        bound_S = 1.0 / (2 * d)
        h_max = max(S.h_max(), Z.h_max())
        record = RationalStepRecord(
            step=k, radius=r_k, gamma_k=gamma_k, rho=rho_k, gamma_shrunk=gamma_shrink(gamma_k, rho_k, h_max, C_K),
            n_generator=len(S), n_integrable=len(dK), n_next=len(Z), n_lazy_pairs=len(upsilon.pairs), h_max=h_max,
            norm_generator=norm_S, bound_generator=bound_S, norm_remaining=norm_Z,
            bound_remaining=remaining_bound(r, gamma, d, k),
            max_coefficient=max(S.coefficient_sup(), Z.coefficient_sup()),
            homological_residual=residual, sampled_generator=sampled)
        steps.append(record)
        floor = max(record.gamma_shrunk, 0.0)
        log.info(f"step {k}: |S|={len(S)} |dK|={len(dK)} |Z|={len(Z)} lazy={len(upsilon.pairs)} "
                 f"norm_S={norm_S:.3e} (bound {bound_S:.3e}) h={h_max}")
        if record.norm_remaining > record.bound_remaining:
            log.warning(f"step {k}: remaining-part norm {norm_Z:.3e} above its ledger value "
                        f"{record.bound_remaining:.3e}")
        if residual is not None and residual > LEDGER.residual_tolerance:
            log.warning(f"step {k}: homological residual {residual:.3e}")
        if check_bounds and norm_S > bound_S:
            raise SmallnessViolated(f"generator bound failed at step {k}", step=k,
                                    details={'norm': norm_S, 'bound': bound_S})

    margins = margin_histogram(domain, r, 200, rng) if rng is not None else {}
    return RationalNormalFormResult(H0=H0, K=K2 + K_extra, upsilon=upsilon, generators=generators, steps=steps,
                                    domain=domain, d=d, degree_cut=cut, Z=Z, margins=margins,
                                    gamma_floors=floors)
