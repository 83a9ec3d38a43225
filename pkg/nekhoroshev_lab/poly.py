"""
Polynomial Hamiltonians - Normal-Form Laboratory
Momentum-conserving polynomials on the index lattice: construction, brackets, fields, norms and truncation
"""

import math
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from types import MappingProxyType
from typing import Any, Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import sympy
from scipy.integrate import solve_ivp
from sympy.polys.domains import QQ, QQ_I

from .config import LEDGER, THREADS
from .errors import DomainError, NoConvergence, PreconditionError, ScaleError
from .kernel import FrequencyConvention, KernelSpec
from .lattice import (FourierState, MultiIndex, NormParams, WeightFunction, _sort_key, momentum,
                      sample_ball_amplitudes, weight_eval, weight_vector)
from .logging_setup import get_logger

log = get_logger("poly")

EXACT_ZERO = QQ_I(0, 0)
EXACT_I = QQ_I(0, 1)


def _q_to_float(q) -> float:
    return int(q.numerator) / int(q.denominator)


def exact_to_complex(c) -> complex:
    return complex(_q_to_float(c.x), _q_to_float(c.y))


def to_exact(value):
    """Gaussian rational from an int, a sympy number or an existing Gaussian rational"""
    if isinstance(value, (int, sympy.Basic)):
        return QQ_I.from_sympy(sympy.sympify(value))
    if isinstance(value, (float, complex)):
        raise DomainError("floating-point value cannot enter the exact tier", {'value': value})
    return QQ_I.convert(value)


def _coerce(value, exact: bool):
    return to_exact(value) if exact else complex(value)


def _sort_tuple(J: MultiIndex) -> Tuple[Tuple[int, int], ...]:
    return tuple(_sort_key(e) for e in J)


# ---------------------------------------------------------------------------
# Compiled evaluator


def _exclusive_prod(F: np.ndarray) -> np.ndarray:
    """out[t, l] = prod over columns m != l of F[t, m]"""
    pre = np.ones_like(F)
    suf = np.ones_like(F)
    if F.shape[1] > 1:
        pre[:, 1:] = np.cumprod(F[:, :-1], axis=1)
        suf[:, :-1] = np.cumprod(F[:, :0:-1], axis=1)[:, ::-1]
    return pre * suf


class _MonomialTable:
    """Exponent matrices of a polynomial on modes -M..M for vectorized evaluation and gradients"""

    def __init__(self, indices: Sequence[MultiIndex], coeffs: Sequence[complex], M: int):
        n = 2 * M + 1
        self.M = M
        self.coeffs = np.array(coeffs, dtype=complex)
        self.plus = np.zeros((len(indices), n), dtype=np.int64)
        self.minus = np.zeros((len(indices), n), dtype=np.int64)
        for t, J in enumerate(indices):
            for j, s in J:
                (self.plus if s > 0 else self.minus)[t, j + M] += 1
        self.max_power = int(max(self.plus.max(initial=0), self.minus.max(initial=0)))
        self._cols = np.arange(n)

    def _powers(self, z: np.ndarray) -> np.ndarray:
        table = np.empty((self.max_power + 1, z.size), dtype=complex)
        table[0] = 1.0
        for k in range(1, self.max_power + 1):
            table[k] = table[k - 1] * z
        return table

    def factors(self, up: np.ndarray, um: np.ndarray) -> Tuple[np.ndarray, ...]:
        """Per-term factor matrices (F, G) and their derivatives (dF, dG), shape (terms, sites)"""
        Pp, Pm = self._powers(up), self._powers(um)
        F = Pp[self.plus, self._cols]
        G = Pm[self.minus, self._cols]
        dF = self.plus * Pp[np.maximum(self.plus - 1, 0), self._cols]
        dG = self.minus * Pm[np.maximum(self.minus - 1, 0), self._cols]
        return F, G, dF, dG

    def evaluate(self, up: np.ndarray, um: np.ndarray) -> complex:
        if not self.coeffs.size:
            return 0j
        F = self._powers(up)[self.plus, self._cols]
        G = self._powers(um)[self.minus, self._cols]
        return complex(np.sum(self.coeffs * F.prod(axis=1) * G.prod(axis=1)))

    def gradient(self, up: np.ndarray, um: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(dP/du_(j,+), dP/du_(j,-)) for every site"""
        n = self._cols.size
        if not self.coeffs.size:
            return np.zeros(n, dtype=complex), np.zeros(n, dtype=complex)
        F, G, dF, dG = self.factors(up, um)
        gp = ((self.coeffs * G.prod(axis=1))[:, None] * _exclusive_prod(F) * dF).sum(axis=0)
        gm = ((self.coeffs * F.prod(axis=1))[:, None] * _exclusive_prod(G) * dG).sum(axis=0)
        return gp, gm

    def vector_field(self, u: np.ndarray) -> np.ndarray:
        """X_(j,+) = -i dP/du_(j,-) at the physical state"""
        _, gm = self.gradient(u, np.conj(u))
        return -1j * gm


# ---------------------------------------------------------------------------
# Polynomial Hamiltonian


class PolyHamiltonian:
    """
    Finite sum of coefficient * u_J over canonical multi-indices.
    Coefficients are complex doubles, or sympy Gaussian rationals when exact=True.
    Immutable; exact zeros are never stored.
    """

    __slots__ = ('_terms', 'exact', '_tables')

    def __init__(self, terms: Optional[Mapping[Any, Any]] = None, exact: bool = False, check: bool = True):
        merged: Dict[MultiIndex, Any] = {}
        zero = EXACT_ZERO if exact else 0j
        for key, value in (terms or {}).items():
            J = key if isinstance(key, MultiIndex) else MultiIndex(key)
            if check and momentum(J) != 0:
                raise DomainError("term violates momentum conservation", {'J': J.format()})
            merged[J] = merged.get(J, zero) + _coerce(value, exact)
        self._terms = MappingProxyType({J: c for J, c in merged.items() if c})
        self.exact = exact
        self._tables: Dict[int, _MonomialTable] = {}

    @classmethod
    def _trusted(cls, terms: Dict[MultiIndex, Any], exact: bool) -> "PolyHamiltonian":
        """Wrap canonical, momentum-conserving, already coerced terms; zeros are pruned"""
        P = cls.__new__(cls)
        P._terms = MappingProxyType({J: c for J, c in terms.items() if c})
        P.exact = exact
        P._tables = {}
        return P

    @classmethod
    def zero(cls, exact: bool = False) -> "PolyHamiltonian":
        return cls._trusted({}, exact)

    @classmethod
    def monomial(cls, J, coeff: Any = 1, exact: bool = False) -> "PolyHamiltonian":
        return cls({J: coeff}, exact=exact)

    # mapping-like access

    @property
    def terms(self) -> Mapping[MultiIndex, Any]:
        return self._terms

    def __len__(self) -> int:
        return len(self._terms)

    def __bool__(self) -> bool:
        return bool(self._terms)

    def __iter__(self) -> Iterator[MultiIndex]:
        return iter(self._terms)

    def items(self):
        return self._terms.items()

    def coefficient(self, J) -> Any:
        key = J if isinstance(J, MultiIndex) else MultiIndex(J)
        return self._terms.get(key, EXACT_ZERO if self.exact else 0j)

    def __repr__(self) -> str:
        tier = "exact" if self.exact else "double"
        return f"PolyHamiltonian({len(self)} terms, degrees={self.degrees()}, {tier})"

    # algebra

    def _aligned(self, other: "PolyHamiltonian") -> Tuple["PolyHamiltonian", "PolyHamiltonian", bool]:
        if self.exact == other.exact:
            return self, other, self.exact
        return self.to_double(), other.to_double(), False

    def __add__(self, other: "PolyHamiltonian") -> "PolyHamiltonian":
        a, b, exact = self._aligned(other)
        out = dict(a._terms)
        zero = EXACT_ZERO if exact else 0j
        for J, c in b.items():
            out[J] = out.get(J, zero) + c
        return PolyHamiltonian._trusted(out, exact)

    def __neg__(self) -> "PolyHamiltonian":
        return PolyHamiltonian._trusted({J: -c for J, c in self.items()}, self.exact)

    def __sub__(self, other: "PolyHamiltonian") -> "PolyHamiltonian":
        return self + (-other)

    def __mul__(self, scalar) -> "PolyHamiltonian":
        factor = _coerce(scalar, self.exact)
        return PolyHamiltonian._trusted({J: c * factor for J, c in self.items()}, self.exact)

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        if not isinstance(other, PolyHamiltonian):
            return NotImplemented
        return dict(self._terms) == dict(other._terms)

    __hash__ = None

    def allclose(self, other: "PolyHamiltonian", atol: float = 1e-12) -> bool:
        diff = (self - other).to_double()
        return all(abs(c) <= atol for c in diff._terms.values())

    def filter(self, keep: Callable[[MultiIndex, Any], bool]) -> "PolyHamiltonian":
        return PolyHamiltonian._trusted({J: c for J, c in self.items() if keep(J, c)}, self.exact)

    def map_coefficients(self, fn: Callable[[MultiIndex, Any], Any], exact: Optional[bool] = None) -> "PolyHamiltonian":
        exact = self.exact if exact is None else exact
        return PolyHamiltonian._trusted({J: fn(J, c) for J, c in self.items()}, exact)

    def to_double(self) -> "PolyHamiltonian":
        if not self.exact:
            return self
        return self.map_coefficients(lambda J, c: exact_to_complex(c), exact=False)

    def conjugate(self) -> "PolyHamiltonian":
        """P-bar: conjugated coefficients on conjugated multi-indices"""
        conj = (lambda c: QQ_I(c.x, -c.y)) if self.exact else (lambda c: c.conjugate())
        return PolyHamiltonian._trusted({J.conjugate(): conj(c) for J, c in self.items()}, self.exact)

    def modulus(self) -> "PolyHamiltonian":
        """The majorant with |P_J| in place of P_J"""
        return PolyHamiltonian._trusted({J: abs(complex(c)) + 0j for J, c in self.to_double().items()}, False)

    # structure

    def degrees(self) -> List[int]:
        return sorted({len(J) for J in self._terms})

    @property
    def degree_range(self) -> Tuple[int, int]:
        ds = self.degrees()
        return (ds[0], ds[-1]) if ds else (0, 0)

    def layer(self, d: int) -> "PolyHamiltonian":
        return self.filter(lambda J, c: len(J) == d)

    def layers(self) -> Dict[int, "PolyHamiltonian"]:
        return {d: self.layer(d) for d in self.degrees()}

    def max_mode(self) -> int:
        return max((J.max_mode() for J in self._terms), default=0)

    def coefficient_sup(self, d: Optional[int] = None) -> float:
        """C_P over the whole polynomial, or over one homogeneous layer"""
        values = [abs(complex(c)) for J, c in self.to_double().items() if d is None or len(J) == d]
        return max(values, default=0.0)

    def is_real(self, atol: float = 1e-12) -> bool:
        for J, c in self.items():
            partner = self.coefficient(J.conjugate())
            if self.exact:
                if partner != QQ_I(c.x, -c.y):
                    return False
            elif abs(partner - c.conjugate()) > atol * max(1.0, abs(c)):
                return False
        return True

    def is_momentum_conserving(self) -> bool:
        return all(momentum(J) == 0 for J in self._terms)

    # evaluation

    def _table(self, M: int) -> _MonomialTable:
        table = self._tables.get(M)
        if table is None:
            double = self.to_double()._terms
            table = _MonomialTable(list(double), list(double.values()), M)
            self._tables[M] = table
        return table

    def _extent(self, u: FourierState) -> Tuple[int, np.ndarray]:
        M = max(u.M, self.max_mode())
        return M, u.pad_to(M).amplitudes

    def evaluate(self, u: FourierState) -> complex:
        M, a = self._extent(u)
        return self._table(M).evaluate(a, np.conj(a))

    def evaluate_extended(self, up: np.ndarray, um: np.ndarray) -> complex:
        """Evaluation with independent u_(j,+) and u_(j,-) values on modes -M..M"""
        M = (np.asarray(up).size - 1) // 2
        return self._table(max(M, self.max_mode())).evaluate(*_pad_pair(up, um, self.max_mode()))

    def gradient_extended(self, up: np.ndarray, um: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        M = (np.asarray(up).size - 1) // 2
        return self._table(max(M, self.max_mode())).gradient(*_pad_pair(up, um, self.max_mode()))


def _pad_pair(up, um, M_needed: int) -> Tuple[np.ndarray, np.ndarray]:
    up = np.asarray(up, dtype=complex)
    um = np.asarray(um, dtype=complex)
    M = (up.size - 1) // 2
    if M >= M_needed:
        return up, um
    pad = M_needed - M
    return np.pad(up, pad), np.pad(um, pad)


# ---------------------------------------------------------------------------
# Construction


def build_hamiltonian(spec: KernelSpec, M: int, exact: bool = False) -> PolyHamiltonian:
    """
    H = sum_k k^2 |u_k|^2 + 1/2 sum_{k1+k2=k3+k4} K_{k1-k3} u_k1 u_k2 conj(u_k3) conj(u_k4),
    modes |k| <= M, ordered quadruples merged onto canonical keys.
    """
    if M < 1:
        raise DomainError("mode cutoff must be >= 1", {'M': M})
    if exact:
        half = QQ_I.from_sympy(sympy.Rational(1, 2))
        kernel = {k: QQ_I.from_sympy(spec.coeff_exact(k)) for k in range(2 * M + 1)}
        zero = EXACT_ZERO
    else:
        half = 0.5
        kernel = {k: spec.coeff(k) for k in range(2 * M + 1)}
        zero = 0j
    terms: Dict[MultiIndex, Any] = defaultdict(lambda: zero)
    for k in range(-M, M + 1):
        if k:
            terms[MultiIndex(((k, 1), (k, -1)))] += _coerce(k * k, exact)
    modes = range(-M, M + 1)
    for k1 in modes:
        for k2 in modes:
            for k3 in modes:
                k4 = k1 + k2 - k3
                if abs(k4) > M:
                    continue
                K = kernel[abs(k1 - k3)]
                if not K:
                    continue
                key = MultiIndex(((k1, 1), (k2, 1), (k3, -1), (k4, -1)))
                terms[key] += half * K
    H = PolyHamiltonian._trusted(dict(terms), exact)
    log.debug(f"built Hamiltonian at M={M}: {len(H)} terms ({'exact' if exact else 'double'})")
    return H


def quadratic_part(M: int, exact: bool = False) -> PolyHamiltonian:
    """H0 = sum_k k^2 |u_k|^2 on |k| <= M"""
    return PolyHamiltonian._trusted(
        {MultiIndex(((k, 1), (k, -1))): _coerce(k * k, exact) for k in range(-M, M + 1) if k}, exact)


def action_monomial(j: int, exact: bool = False) -> PolyHamiltonian:
    """|u_j|^2"""
    return PolyHamiltonian.monomial(((j, 1), (j, -1)), 1, exact=exact)


def truncate_modes(P: PolyHamiltonian, M: int) -> PolyHamiltonian:
    return P.filter(lambda J, c: all(abs(j) <= M for j, _ in J))


def quartic_quadruple_sum(spec: KernelSpec, u: FourierState) -> complex:
    """Unsymmetrized 1/2 sum over ordered quadruples; oracle for the merged quartic coefficients"""
    a = u.amplitudes
    M = u.M
    total = 0j
    for k1 in range(-M, M + 1):
        for k2 in range(-M, M + 1):
            for k3 in range(-M, M + 1):
                k4 = k1 + k2 - k3
                if abs(k4) <= M:
                    total += (0.5 * spec.coeff(k1 - k3) * a[k1 + M] * a[k2 + M]
                              * np.conj(a[k3 + M]) * np.conj(a[k4 + M]))
    return complex(total)


def quartic_quadruple_gradient(spec: KernelSpec, u: FourierState) -> np.ndarray:
    """dH_nl/d conj(u_j) = sum_{k1+k2=j+k4} K_{k1-j} u_k1 u_k2 conj(u_k4), by direct summation"""
    a = u.amplitudes
    M = u.M
    out = np.zeros(2 * M + 1, dtype=complex)
    for j in range(-M, M + 1):
        for k1 in range(-M, M + 1):
            for k2 in range(-M, M + 1):
                k4 = k1 + k2 - j
                if abs(k4) <= M:
                    out[j + M] += spec.coeff(k1 - j) * a[k1 + M] * a[k2 + M] * np.conj(a[k4 + M])
    return out


# ---------------------------------------------------------------------------
# Poisson bracket


def _without(J: MultiIndex, entry) -> Tuple:
    i = J.index(entry)
    return J[:i] + J[i + 1:]


def _bracket_terms(items: Sequence[Tuple[MultiIndex, Any]], index: Dict[Tuple[int, int], List[Tuple[int, Any, Tuple]]],
                   degree_cut: Optional[int], exact: bool) -> Tuple[Dict[MultiIndex, Any], Dict[MultiIndex, Any]]:
    zero = EXACT_ZERO if exact else 0j
    low: Dict[MultiIndex, Any] = defaultdict(lambda: zero)
    high: Dict[MultiIndex, Any] = defaultdict(lambda: zero)
    for A, a in items:
        for (j, s), nA in Counter(A).items():
            partners = index.get((j, -s))
            if not partners:
                continue
            rest_a = _without(A, (j, s))
            for nB, b, rest_b in partners:
                w = -s * nA * nB
                factor = QQ_I(0, w) if exact else complex(0, w)
                key = MultiIndex._from_sorted(sorted(rest_a + rest_b, key=_sort_key))
                target = high if degree_cut is not None and len(key) > degree_cut else low
                target[key] += factor * a * b
    return low, high


def _bracket(P: PolyHamiltonian, Q: PolyHamiltonian,
             degree_cut: Optional[int]) -> Tuple[PolyHamiltonian, PolyHamiltonian]:
    """Term pairs split over THREADS chunks of P; partial sums merged in chunk order"""
    P, Q, exact = P._aligned(Q)
    index: Dict[Tuple[int, int], List[Tuple[int, Any, Tuple]]] = defaultdict(list)
    for B, b in Q.items():
        for entry, nB in Counter(B).items():
            index[entry].append((nB, b, _without(B, entry)))
    items = list(P.items())
    workers = min(THREADS, len(items))
    if workers <= 1:
        low, high = _bracket_terms(items, index, degree_cut, exact)
    else:
        size = math.ceil(len(items) / workers)
        chunks = [items[i:i + size] for i in range(0, len(items), size)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda chunk: _bracket_terms(chunk, index, degree_cut, exact), chunks))
        low, high = parts[0]
        for part_low, part_high in parts[1:]:
            for key, c in part_low.items():
                low[key] += c
            for key, c in part_high.items():
                high[key] += c
    return PolyHamiltonian._trusted(dict(low), exact), PolyHamiltonian._trusted(dict(high), exact)


def poisson_bracket(P: PolyHamiltonian, Q: PolyHamiltonian) -> PolyHamiltonian:
    """{P,Q} = -i sum_(j,sigma) sigma dP/du_(j,sigma) dQ/du_(j,-sigma)"""
    return _bracket(P, Q, None)[0]


def poisson_bracket_split(P: PolyHamiltonian, Q: PolyHamiltonian,
                          degree_cut: int) -> Tuple[PolyHamiltonian, PolyHamiltonian]:
    """{P,Q} split into (degree <= degree_cut, degree > degree_cut)"""
    return _bracket(P, Q, degree_cut)


def bracket_extended(P: PolyHamiltonian, Q: PolyHamiltonian, up: np.ndarray, um: np.ndarray) -> complex:
    """{P,Q} at an extended state from the two gradients; oracle for the term algebra"""
    M = max((np.asarray(up).size - 1) // 2, P.max_mode(), Q.max_mode())
    up, um = _pad_pair(up, um, M)
    gpP, gmP = P.gradient_extended(up, um)
    gpQ, gmQ = Q.gradient_extended(up, um)
    return complex(-1j * np.sum(gpP * gmQ - gmP * gpQ))


# ---------------------------------------------------------------------------
# Vector fields and flows


def vector_field(P: PolyHamiltonian, u: FourierState) -> FourierState:
    """(X_P)_(j,+) = -i dP/du_(j,-) on modes -max(M_u, M_P)..max(M_u, M_P)"""
    M, a = P._extent(u)
    return FourierState(P._table(M).vector_field(a))


def _amplitude_scale(a: np.ndarray) -> float:
    """atol is taken relative to the largest amplitude, capped at 1"""
    return min(max(float(np.abs(a).max(initial=0.0)), 1e-30), 1.0)


def flow(P: PolyHamiltonian, u: FourierState, t: float,
         rtol: Optional[float] = None, atol: Optional[float] = None) -> FourierState:
    """Time-t map of X_P (t may be negative), adaptive DOP853 on complex amplitudes"""
    M, a = P._extent(u)
    if t == 0 or not P:
        return FourierState(a.copy())
    table = P._table(M)
    sol = solve_ivp(lambda _, y: table.vector_field(y), (0.0, float(t)), a, method="DOP853",
                    rtol=rtol or LEDGER.flow_rtol, atol=(atol or LEDGER.flow_atol) * _amplitude_scale(a))
    if not sol.success:
        raise NoConvergence(f"flow integration failed: {sol.message}", {'t': t})
    return FourierState(sol.y[:, -1])


# ---------------------------------------------------------------------------
# Norms


@dataclass
class NormBound:
    certified: float
    sampled: float

    @property
    def exceeded(self) -> bool:
        return self.sampled > self.certified

    def __float__(self) -> float:
        return self.certified

    def to_dict(self) -> Dict[str, Any]:
        return {'certified': self.certified, 'sampled': self.sampled, 'exceeded': self.exceeded}


def certified_norm(P: PolyHamiltonian, r: float) -> float:
    """sum over layers of C_{P,d} r^{d-2}"""
    return float(sum(P.coefficient_sup(d) * r ** (d - 2) for d in P.degrees()))


def sampled_norm(P: PolyHamiltonian, r: float, s: float, f: WeightFunction, rng: np.random.Generator,
                 n_samples: Optional[int] = None, M: Optional[int] = None) -> float:
    """(1/r) max over sampled states on the sphere N_s = r of N_s(X_{P-underline})"""
    if not P:
        return 0.0
    n_samples = n_samples or LEDGER.sup_samples
    M = max(M or 0, P.max_mode(), 1)
    majorant = P.modulus()
    table = majorant._table(M)
    w = weight_vector(M, s, f)
    states = sample_ball_amplitudes(M, s, f, r, n_samples, rng, surface=True)
    best = max(float(np.sum(w * np.abs(table.vector_field(a)))) for a in states)
    return best / r


def norm_bound(P: PolyHamiltonian, p: NormParams, f: WeightFunction,
               rng: Optional[np.random.Generator] = None, n_samples: Optional[int] = None) -> NormBound:
    """Certified coefficient bound on |P|_{r,s} with a sampled sup as companion diagnostic"""
    if p.s <= p.s0:
        raise ScaleError("norm bound needs s > s0", {'s': p.s, 's0': p.s0})
    certified = certified_norm(P, p.r)
    sampled = sampled_norm(P, p.r, p.s, f, rng or np.random.default_rng(0), n_samples)
    result = NormBound(certified, sampled)
    if result.exceeded:
        log.warning(f"sampled norm {sampled:.3e} exceeds certified bound {certified:.3e}")
    return result


def high_vanishing_order(P: PolyHamiltonian, N: int) -> float:
    """min over terms of the number of entries with |j| > N; inf for the zero polynomial"""
    return min((sum(1 for j, _ in J if abs(j) > N) for J in P), default=math.inf)


def truncation_tail_bound(P: PolyHamiltonian, p: NormParams, f: WeightFunction, N: int) -> float:
    """sum over layers of C_{P,d} (2r)^{d-2} e^{-(s-s0) f(N)}"""
    if p.s <= p.s0:
        raise ScaleError("truncation bound needs s > s0", {'s': p.s, 's0': p.s0})
    order = high_vanishing_order(P, N)
    if order < 3:
        raise PreconditionError("polynomial does not vanish to order 3 in the high modes",
                                {'N': N, 'order': order})
    decay = math.exp(-(p.s - p.s0) * weight_eval(f, max(float(N), f.c)))
    return float(sum(P.coefficient_sup(d) * (2.0 * p.r) ** (d - 2) for d in P.degrees()) * decay)


@dataclass
class LieBracketReport:
    delta: float
    q_norm: float
    lhs_sampled: float
    rhs_certified: float
    rhs_sampled: float

    @property
    def passed(self) -> bool:
        return self.lhs_sampled <= self.rhs_certified

    def to_dict(self) -> Dict[str, Any]:
        return {'delta': self.delta, 'q_norm': self.q_norm, 'lhs_sampled': self.lhs_sampled,
                'rhs_certified': self.rhs_certified, 'rhs_sampled': self.rhs_sampled, 'passed': self.passed}


def lie_bracket_estimate_check(P: PolyHamiltonian, Q: PolyHamiltonian, p: NormParams, f: WeightFunction,
                               rho: float, rng: np.random.Generator,
                               n_samples: Optional[int] = None) -> LieBracketReport:
    """
    Sampled |{P,Q}|_{r,s} against |P|_{r+rho,s} |Q|_{r+rho,s} / (2 delta),
    delta = rho / (8e(r+rho)); needs |Q|_{r,s} <= delta.
    """
    if rho <= 0:
        raise DomainError("rho must be positive", {'rho': rho})
    delta = rho / (8.0 * math.e * (p.r + rho))
    q_norm = certified_norm(Q, p.r)
    if q_norm > delta:
        raise PreconditionError("generator too large for the Lie bracket estimate",
                                {'q_norm': q_norm, 'delta': delta})
    M = max(P.max_mode(), Q.max_mode(), 1)
    lhs = sampled_norm(poisson_bracket(P, Q), p.r, p.s, f, rng, n_samples, M)
    big = p.r + rho
    rhs_cert = certified_norm(P, big) * certified_norm(Q, big) / (2.0 * delta)
    rhs_samp = (sampled_norm(P, big, p.s, f, rng, n_samples, M)
                * sampled_norm(Q, big, p.s, f, rng, n_samples, M) / (2.0 * delta))
    return LieBracketReport(delta, q_norm, lhs, rhs_cert, rhs_samp)


# ---------------------------------------------------------------------------
# Dump format


def _format_value(c, exact: bool) -> str:
    if exact:
        return f"{int(c.x.numerator)}/{int(c.x.denominator)} {int(c.y.numerator)}/{int(c.y.denominator)}"
    c = complex(c)
    return f"{c.real + 0.0:.17g} {c.imag + 0.0:.17g}"


def dump_poly(P: PolyHamiltonian) -> str:
    """One line per term, 'sigma j ... : re im', sorted by (degree, canonical entries)"""
    lines = [f"# poly exact={int(P.exact)} terms={len(P)}"]
    for J in sorted(P, key=lambda J: (len(J), _sort_tuple(J))):
        lines.append(f"{J.format()} : {_format_value(P.terms[J], P.exact)}")
    return "\n".join(lines) + "\n"


def _parse_exact(token: str):
    num, _, den = token.partition("/")
    return QQ(int(num), int(den or 1))


def parse_poly(text: str) -> PolyHamiltonian:
    exact = False
    terms: Dict[MultiIndex, Any] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            exact = exact or "exact=1" in line
            continue
        index_part, _, value_part = line.partition(":")
        re_text, im_text = value_part.split()
        J = MultiIndex.parse(index_part)
        if exact:
            terms[J] = QQ_I(_parse_exact(re_text), _parse_exact(im_text))
        else:
            terms[J] = complex(float(re_text), float(im_text))
    return PolyHamiltonian(terms, exact=exact)


def iter_monomials(P: PolyHamiltonian) -> Iterable[Tuple[MultiIndex, complex]]:
    """Terms in dump order, doubles"""
    D = P.to_double()
    for J in sorted(D, key=lambda J: (len(J), _sort_tuple(J))):
        yield J, complex(D.terms[J])


def action_quartic(spec: KernelSpec, M: int, convention: FrequencyConvention = FrequencyConvention.HAMILTONIAN,
                   exact: bool = False) -> PolyHamiltonian:
    """
    K2 = sum_{a<=b} k_ab |u_a|^2 |u_b|^2 with dK2/dI_j = Omega_j under the chosen convention:
    HAMILTONIAN k_ab = K0 + K_{b-a} (a<b), K0/2 (a=b); PRINTED k_ab = 2K_{b-a} (a<b), K0 (a=b).
    """
    if exact:
        K = {k: QQ_I.from_sympy(spec.coeff_exact(k)) for k in range(2 * M + 1)}
        half, two = QQ_I.from_sympy(sympy.Rational(1, 2)), QQ_I(2, 0)
    else:
        K = {k: complex(spec.coeff(k)) for k in range(2 * M + 1)}
        half, two = 0.5, 2.0
    terms: Dict[MultiIndex, Any] = {}
    for a in range(-M, M + 1):
        for b in range(a, M + 1):
            key = MultiIndex(((a, 1), (b, 1), (a, -1), (b, -1)))
            if convention is FrequencyConvention.HAMILTONIAN:
                terms[key] = half * K[0] if a == b else K[0] + K[b - a]
            else:
                terms[key] = K[0] if a == b else two * K[b - a]
    return PolyHamiltonian._trusted(terms, exact)
