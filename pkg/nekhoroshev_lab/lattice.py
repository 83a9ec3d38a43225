"""
Index Lattice - Normal-Form Laboratory
Lattice sites (j, sigma), canonical multi-indices, admissible weights and weighted norms
"""

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import gamma as gamma_fn, gammaincc

from .errors import DomainError, NoConvergence


class Index(NamedTuple):
    """Lattice site J = (j, sigma); sigma=+1 is u_j, sigma=-1 its conjugate"""
    j: int
    sigma: int

    def conjugate(self) -> "Index":
        return Index(self.j, -self.sigma)


def _sort_key(entry: Tuple[int, int]) -> Tuple[int, int]:
    # (j, sigma) lexicographic with sigma=+1 before sigma=-1
    return (entry[0], -entry[1])


class MultiIndex(tuple):
    """
    Canonical multi-index: entries sorted by (j, sigma), sigma=+1 first.
    Equal multisets give equal (and equally hashed) keys.
    """

    __slots__ = ()

    def __new__(cls, entries: Iterable[Tuple[int, int]]):
        items = [Index(int(j), int(s)) for j, s in entries]
        if len(items) < 2:
            raise DomainError("multi-index needs at least two entries", {'entries': items})
        for item in items:
            if item.sigma not in (1, -1):
                raise DomainError("sigma must be +1 or -1", {'entry': item})
        items.sort(key=_sort_key)
        return tuple.__new__(cls, items)

    @classmethod
    def _from_sorted(cls, entries: Sequence[Tuple[int, int]]) -> "MultiIndex":
        """Unchecked constructor for entries already in canonical order"""
        return tuple.__new__(cls, entries)

    @classmethod
    def parse(cls, text: str) -> "MultiIndex":
        """Inverse of format(): tokens like '+3', '--2' (sign of sigma then j)"""
        entries = []
        for token in text.split():
            sign, value = token[0], token[1:]
            if sign not in "+-":
                raise DomainError(f"bad multi-index token {token!r}")
            entries.append((int(value), 1 if sign == "+" else -1))
        return cls(entries)

    def format(self) -> str:
        return " ".join(f"{'+' if s > 0 else '-'}{j}" for j, s in self)

    def conjugate(self) -> "MultiIndex":
        return MultiIndex((j, -s) for j, s in self)

    def __add__(self, other) -> "MultiIndex":
        return MultiIndex(list(self) + list(other))

    def charge(self) -> Dict[int, int]:
        """Per-site sigma balance n_+(j) - n_-(j), zero sites dropped"""
        balance: Dict[int, int] = {}
        for j, s in self:
            balance[j] = balance.get(j, 0) + s
        return {j: c for j, c in balance.items() if c != 0}

    def max_mode(self) -> int:
        return max(abs(j) for j, _ in self)


def canonical(entries: Iterable[Tuple[int, int]]) -> MultiIndex:
    return MultiIndex(entries)


def momentum(J: Sequence[Tuple[int, int]]) -> int:
    return sum(s * j for j, s in J)


def energy(J: Sequence[Tuple[int, int]]) -> int:
    return sum(s * j * j for j, s in J)


def is_resonant(J: Sequence[Tuple[int, int]]) -> bool:
    return energy(J) == 0


def is_action_type(J: Sequence[Tuple[int, int]]) -> bool:
    """True iff the entries pair off exactly into (j,+),(j,-) couples"""
    counts = Counter(J)
    for (j, s), n in counts.items():
        if counts.get((j, -s), 0) != n:
            return False
    return True


def reduce_pairs(J: Sequence[Tuple[int, int]]) -> Tuple[Tuple[int, int], ...]:
    """Drop every (j,+),(j,-) couple; what remains carries the same charge"""
    charge: Dict[int, int] = {}
    for j, s in J:
        charge[j] = charge.get(j, 0) + s
    reduced: List[Tuple[int, int]] = []
    for j in sorted(charge):
        c = charge[j]
        reduced.extend([(j, 1 if c > 0 else -1)] * abs(c))
    return tuple(reduced)


# ---------------------------------------------------------------------------
# Weights and norms


class WeightKind(Enum):
    GEVREY = "gevrey"
    LOGULTRA = "logultra"


@dataclass(frozen=True)
class WeightFunction:
    """Admissible weight f with cutoff <j> = max(|j|, c) and constant C_f"""
    kind: WeightKind
    parameter: float          # g in (0,1) for Gevrey, theta > 1 for LogUltra
    c: float = 1.0            # cutoff, f evaluated at max(|j|, c)
    C_f: float = 0.9          # validated by check_weight_condition, never derived

    def __post_init__(self):
        if self.kind is WeightKind.GEVREY and not 0.0 < self.parameter < 1.0:
            raise DomainError("Gevrey exponent must lie in (0,1)", {'g': self.parameter})
        if self.kind is WeightKind.LOGULTRA and not self.parameter > 1.0:
            raise DomainError("log-ultra exponent must exceed 1", {'theta': self.parameter})
        if self.c < 1.0:
            raise DomainError("cutoff c must be >= 1", {'c': self.c})
        if not 0.0 <= self.C_f < 1.0:
            raise DomainError("C_f must lie in [0,1)", {'C_f': self.C_f})

    @classmethod
    def gevrey(cls, g: float, c: float = 1.0, C_f: float = 0.9) -> "WeightFunction":
        return cls(WeightKind.GEVREY, g, c, C_f)

    @classmethod
    def log_ultra(cls, theta: float, c: float = 1.0, C_f: float = 0.9) -> "WeightFunction":
        return cls(WeightKind.LOGULTRA, theta, c, C_f)

    def __call__(self, x: float) -> float:
        return weight_eval(self, x)

    def bracket(self, j) -> np.ndarray:
        """<j> = max(|j|, c), vectorized"""
        return np.maximum(np.abs(np.asarray(j, dtype=float)), self.c)

    def on_modes(self, modes, use_cutoff: bool = True) -> np.ndarray:
        """f(<j>) on an integer array; use_cutoff=False evaluates f(|j|) with |j|<1 mapped to 1"""
        x = self.bracket(modes) if use_cutoff else np.maximum(np.abs(np.asarray(modes, dtype=float)), 1.0)
        if self.kind is WeightKind.GEVREY:
            return x ** self.parameter
        return np.log(x) ** self.parameter

    def to_config(self) -> Dict[str, Any]:
        return {'kind': self.kind.value, 'parameter': self.parameter, 'c': self.c, 'C_f': self.C_f}


def weight_eval(f: WeightFunction, x: float) -> float:
    if x < f.c:
        raise DomainError("weight evaluated below its cutoff", {'x': x, 'c': f.c})
    if f.kind is WeightKind.GEVREY:
        return float(x) ** f.parameter
    return math.log(x) ** f.parameter


def weight_from_config(block: Dict[str, Any]) -> WeightFunction:
    return WeightFunction(WeightKind(block['kind']), float(block['parameter']),
                          float(block.get('c', 1.0)), float(block.get('C_f', 0.9)))


@dataclass(frozen=True)
class NormParams:
    s: float                  # weight scale
    s0: float                 # base scale of the norm estimate
    r: float                  # ball radius

    def __post_init__(self):
        if self.s <= 0 or self.s0 <= 0 or self.r <= 0:
            raise DomainError("s, s0 and r must be positive", {'s': self.s, 's0': self.s0, 'r': self.r})


@dataclass(frozen=True, eq=False)
class FourierState:
    """Complex amplitudes u_j for modes -M..M (index j+M in the array)"""
    amplitudes: np.ndarray = field(repr=False)

    def __post_init__(self):
        a = np.asarray(self.amplitudes, dtype=complex)
        if a.ndim != 1 or a.size % 2 != 1:
            raise DomainError("amplitudes must be a 1-D array of odd length 2M+1", {'shape': a.shape})
        object.__setattr__(self, 'amplitudes', a)

    @classmethod
    def zeros(cls, M: int) -> "FourierState":
        return cls(np.zeros(2 * M + 1, dtype=complex))

    @classmethod
    def from_modes(cls, M: int, values: Dict[int, complex]) -> "FourierState":
        a = np.zeros(2 * M + 1, dtype=complex)
        for j, v in values.items():
            if abs(j) > M:
                raise DomainError("mode outside the state's range", {'j': j, 'M': M})
            a[j + M] = v
        return cls(a)

    @property
    def M(self) -> int:
        return (self.amplitudes.size - 1) // 2

    @property
    def modes(self) -> np.ndarray:
        return np.arange(-self.M, self.M + 1)

    @property
    def actions(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def mode(self, j: int) -> complex:
        if abs(j) > self.M:
            return 0j
        return complex(self.amplitudes[j + self.M])

    def pad_to(self, M: int) -> "FourierState":
        if M < self.M:
            if np.any(self.amplitudes[: self.M - M]) or np.any(self.amplitudes[self.M + M + 1:]):
                raise DomainError("cannot shrink a state with support beyond the new cutoff", {'M': M})
            return FourierState(self.amplitudes[self.M - M: self.M + M + 1].copy())
        a = np.zeros(2 * M + 1, dtype=complex)
        a[M - self.M: M + self.M + 1] = self.amplitudes
        return FourierState(a)

    def with_amplitudes(self, a: np.ndarray) -> "FourierState":
        return FourierState(np.asarray(a, dtype=complex).copy())


def weighted_norm(u: FourierState, p: NormParams, f: WeightFunction,
                  mode: str = "l1", use_cutoff: bool = True) -> float:
    """N_s(u) = sum_j e^{s f(<j>)} |u_j|; mode='l2' gives (sum e^{2sf}|u_j|^2)^{1/2}"""
    w = f.on_modes(u.modes, use_cutoff=use_cutoff)
    if mode == "l1":
        return float(np.sum(np.exp(p.s * w) * np.abs(u.amplitudes)))
    if mode == "l2":
        return float(np.sqrt(np.sum(np.exp(2.0 * p.s * w) * np.abs(u.amplitudes) ** 2)))
    raise DomainError(f"unknown norm mode {mode!r}")


def weight_vector(M: int, s: float, f: WeightFunction, use_cutoff: bool = True) -> np.ndarray:
    """e^{s f(<j>)} on modes -M..M"""
    return np.exp(s * f.on_modes(np.arange(-M, M + 1), use_cutoff=use_cutoff))


# ---------------------------------------------------------------------------
# Base scale s0


def _lattice_tail(f: WeightFunction, a: float, J: int) -> Optional[float]:
    """Rigorous bound on sum_{j>J} e^{-a f(j)} (J >= c); None when the bound cannot be closed"""
    if f.kind is WeightKind.GEVREY:
        g = f.parameter
        # integral of e^{-a x^g} over [J, inf)
        return float(gamma_fn(1.0 / g) * gammaincc(1.0 / g, a * J ** g) / (g * a ** (1.0 / g)))
    theta = f.parameter
    y = math.log(J)
    # x = e^y: integrand e^{y - a y^theta}, exponent slope >= 1 once a*theta*y^(theta-1) >= 2
    if y <= 0 or a * theta * y ** (theta - 1.0) < 2.0:
        return None
    return math.exp(y - a * y ** theta)


def lattice_sum(f: WeightFunction, s0: float, cutoff: int = 2000) -> float:
    """Upper bound on sum over J in Z x {+1,-1} of e^{(2C_f-2) s0 f(<j>)}"""
    a = (2.0 - 2.0 * f.C_f) * s0
    j = np.arange(0, cutoff + 1)
    terms = np.exp(-a * f.on_modes(j))
    head = 2.0 * (terms[0] + 2.0 * terms[1:].sum())
    tail = _lattice_tail(f, a, max(cutoff, int(math.ceil(f.c))))
    if tail is None or not math.isfinite(tail):
        raise NoConvergence("tail bound does not close at the working cutoff", {'cutoff': cutoff, 's0': s0})
    return float(head + 4.0 * tail)


def compute_s0(f: WeightFunction, tol: float = 1e-6, cutoff: int = 2000, max_doublings: int = 60) -> float:
    """Smallest s0 (to bisection resolution tol) with lattice_sum(f, s0) < 1/3"""
    if not f.C_f < 1.0:
        raise DomainError("C_f must be < 1", {'C_f': f.C_f})

    def feasible(s0: float) -> bool:
        try:
            return lattice_sum(f, s0, cutoff) < 1.0 / 3.0
        except NoConvergence:
            return False

    hi = 1.0
    for _ in range(max_doublings):
        if feasible(hi):
            break
        hi *= 2.0
    else:
        raise NoConvergence("no s0 found with lattice sum below 1/3", {'last_s0': hi})
    lo = 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# Exhaustive checks


@dataclass
class WeightConditionReport:
    passed: bool
    worst_slack: float
    worst_tuple: Tuple[int, ...]
    n_checked: int

    def to_dict(self) -> Dict[str, Any]:
        return {'passed': self.passed, 'worst_slack': self.worst_slack,
                'worst_tuple': list(self.worst_tuple), 'n_checked': self.n_checked}


def weight_condition_slack(f: WeightFunction, xs: Sequence[float]) -> float:
    """f(x_m) + C_f * sum_{l != m} f(x_l) - f(sum x), x_m the largest entry"""
    xs = sorted(xs, reverse=True)
    rhs = weight_eval(f, xs[0]) + f.C_f * sum(weight_eval(f, x) for x in xs[1:])
    return rhs - weight_eval(f, sum(xs))


def check_weight_condition(f: WeightFunction, dmax: int, xmax: int) -> WeightConditionReport:
    if dmax < 2:
        raise DomainError("dmax must be >= 2", {'dmax': dmax})
    grid = range(int(math.ceil(f.c)), int(xmax) + 1)
    worst, worst_tuple, count = math.inf, (), 0
    for length in range(2, dmax + 1):
        for xs in itertools.combinations_with_replacement(grid, length):
            slack = weight_condition_slack(f, xs)
            count += 1
            if slack < worst:
                worst, worst_tuple = slack, xs
    return WeightConditionReport(worst >= -1e-12, float(worst), tuple(worst_tuple), count)


@dataclass
class ThirdIndexReport:
    passed: bool
    M: int
    d: int
    threshold: float
    n_checked: int
    counterexamples: List[Tuple[Tuple[int, int], ...]]

    def to_dict(self) -> Dict[str, Any]:
        return {'passed': self.passed, 'M': self.M, 'd': self.d, 'threshold': self.threshold,
                'n_checked': self.n_checked, 'counterexamples': [list(c) for c in self.counterexamples]}


def _large_pair_solutions(m_small: int, e_small: int) -> List[Tuple[Tuple[int, int], Tuple[int, int]]]:
    """All (J1, J2) with sigma1*j1 + sigma2*j2 = -m_small and sigma1*j1^2 + sigma2*j2^2 = -e_small"""
    out = []
    for s1, s2 in ((1, 1), (-1, -1), (1, -1), (-1, 1)):
        if s1 == s2:
            A, B = -s1 * m_small, -s1 * e_small
            disc = 2 * B - A * A
            if disc < 0:
                continue
            root = math.isqrt(disc)
            if root * root != disc or (A + root) % 2:
                continue
            for j1 in {(A + root) // 2, (A - root) // 2}:
                out.append(((j1, s1), (A - j1, s2)))
        else:
            D = -s1 * m_small
            if D == 0:
                # j1 == j2 with opposite signs: J1 is the conjugate of J2, excluded
                continue
            num = -s1 * e_small
            if num % D:
                continue
            S = num // D
            if (S + D) % 2:
                continue
            j1 = (S + D) // 2
            out.append(((j1, s1), (j1 - D, s2)))
    return out


def third_index_bound_check(M: int, d: int, require_momentum: bool = True) -> ThirdIndexReport:
    """
    Exhaustive search for resonant multi-indices of length d with |J1| >= M,
    J1 != conj(J2) and third-largest modulus below sqrt(M/(d-2)).
    Only the d-2 small entries are enumerated; the two large ones are solved for.
    """
    if d < 3:
        raise DomainError("third-index bound needs d >= 3", {'d': d})
    threshold = math.sqrt(M / (d - 2))
    top = math.ceil(threshold) - 1
    small_sites = [(j, s) for j in range(-top, top + 1) for s in (1, -1) if abs(j) < threshold]
    counterexamples = []
    n_checked = 0
    for smalls in itertools.combinations_with_replacement(small_sites, d - 2):
        n_checked += 1
        e_small = energy(smalls)
        m_small = momentum(smalls) if require_momentum else None
        largest_small = max(abs(j) for j, _ in smalls)
        pairs = (_large_pair_solutions(m_small, e_small) if require_momentum
                 else _energy_only_pairs(e_small, M, largest_small))
        for J1, J2 in pairs:
            if abs(J1[0]) < abs(J2[0]):
                J1, J2 = J2, J1
            if abs(J1[0]) < M or abs(J2[0]) < largest_small:
                continue
            if J1 == (J2[0], -J2[1]):
                continue
            counterexamples.append(tuple(sorted((J1, J2) + tuple(smalls), key=_sort_key)))
    return ThirdIndexReport(not counterexamples, M, d, threshold, n_checked, counterexamples)


def _energy_only_pairs(e_small: int, M: int, largest_small: int) -> List[Tuple[Tuple[int, int], Tuple[int, int]]]:
    """Energy-only variant: every (a, b) with sigma1 a^2 + sigma2 b^2 = -e_small, a >= M"""
    out = []
    target = -e_small
    # a^2 - b^2 = +-target with a > b needs a + b <= |target|; a == b needs target == 0
    bound = max(abs(target), M) + 1
    for a in range(M, bound + 1):
        for b in range(largest_small, a + 1):
            for s1, s2 in ((1, 1), (-1, -1), (1, -1), (-1, 1)):
                if s1 * a * a + s2 * b * b == target:
                    for sa in (1, -1):
                        for sb in (1, -1):
                            out.append(((sa * a, s1), (sb * b, s2)))
    return out


# ---------------------------------------------------------------------------
# Uniform states in the weighted l1 ball


def sample_ball_amplitudes(M: int, s: float, f: WeightFunction, r: float, n: int,
                           rng: np.random.Generator, surface: bool = False,
                           use_cutoff: bool = True) -> np.ndarray:
    """
    n uniform samples of {sum_j e^{s f(<j>)} |z_j| <= r} in C^{2M+1}, shape (n, 2M+1).
    With y_j = e^{s f}|z_j| the area element m dm makes y ~ r * Dirichlet(2,...,2, 1),
    the last (slack) coordinate absent on the surface.
    """
    w = weight_vector(M, s, f, use_cutoff=use_cutoff)
    sites = 2 * M + 1
    g = rng.standard_gamma(2.0, size=(n, sites))
    total = g.sum(axis=1)
    if not surface:
        total = total + rng.standard_exponential(size=n)
    y = r * g / total[:, None]
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(n, sites))
    return (y / w[None, :]) * np.exp(1j * phases)
