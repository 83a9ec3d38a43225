"""
Non-local Kernel - Normal-Form Laboratory
Kernel coefficients, state-dependent frequencies and non-resonance margins
"""

import itertools
import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import sympy

from .config import LEDGER
from .errors import DomainError, EnumerationOverflow, ModeOutOfRange
from .lattice import FourierState, NormParams, WeightFunction, is_action_type, weighted_norm
from .logging_setup import get_logger

log = get_logger("kernel")


class KernelKind(Enum):
    POWER = "power"
    EXP = "exp"


class FrequencyConvention(Enum):
    """
    PRINTED:     Omega_j = 2 sum_k K_{|k-j|} |u_k|^2 (derivative of sum_{k1,k2} K_{|k1-k2|} I I)
    HAMILTONIAN: Omega_j = dK2/dI_j for the resonant quartic actually contained in H
    """
    PRINTED = "printed"
    HAMILTONIAN = "hamiltonian"


@dataclass(frozen=True)
class KernelSpec:
    kind: KernelKind
    parameter: float          # p (positive integer) for POWER, beta >= 1 for EXP

    def __post_init__(self):
        if self.kind is KernelKind.POWER:
            if self.parameter < 1 or int(self.parameter) != self.parameter:
                raise DomainError("power-law exponent must be a positive integer", {'p': self.parameter})
        elif self.parameter < 1.0:
            raise DomainError("exponential kernel needs beta >= 1", {'beta': self.parameter})

    @classmethod
    def power(cls, p: int) -> "KernelSpec":
        return cls(KernelKind.POWER, int(p))

    @classmethod
    def exponential(cls, beta: float = 1.0) -> "KernelSpec":
        return cls(KernelKind.EXP, float(beta))

    @property
    def C_K(self) -> float:
        return 1.0

    def coeff(self, k: int) -> float:
        return kernel_coeff(self, k)

    def coeff_exact(self, k: int):
        """Exact rational K_k; only the power law has one"""
        if self.kind is not KernelKind.POWER:
            raise DomainError("exact kernel coefficients exist only for the power law")
        k = abs(int(k))
        return sympy.Integer(0) if k == 0 else sympy.Rational(1, k ** int(self.parameter))

    def to_config(self) -> Dict[str, Any]:
        return {'kind': self.kind.value, 'parameter': self.parameter}

    @classmethod
    def from_config(cls, block: Dict[str, Any]) -> "KernelSpec":
        kind = KernelKind(block['kind'])
        if kind is KernelKind.POWER:
            return cls.power(int(block['parameter']))
        return cls.exponential(float(block['parameter']))


def kernel_coeff(spec: KernelSpec, k: int) -> float:
    k = abs(int(k))
    if spec.kind is KernelKind.POWER:
        return 0.0 if k == 0 else float(k) ** (-int(spec.parameter))
    return math.exp(-(float(k) ** spec.parameter))


@lru_cache(maxsize=64)
def _kernel_table(spec: KernelSpec, n: int) -> np.ndarray:
    return np.array([kernel_coeff(spec, k) for k in range(n)])


@lru_cache(maxsize=64)
def frequency_matrix(spec: KernelSpec, M: int,
                     convention: FrequencyConvention = FrequencyConvention.PRINTED) -> np.ndarray:
    """W with Omega = W @ I, rows and columns indexed by modes -M..M"""
    sites = np.arange(-M, M + 1)
    dist = np.abs(sites[:, None] - sites[None, :])
    K = _kernel_table(spec, 2 * M + 1)[dist]
    if convention is FrequencyConvention.PRINTED:
        W = 2.0 * K
    else:
        W = K.copy()
        np.fill_diagonal(W, 0.0)
        W += kernel_coeff(spec, 0)
    W.setflags(write=False)
    return W


def lipschitz_constant(spec: KernelSpec, convention: FrequencyConvention = FrequencyConvention.PRINTED) -> float:
    """Largest entry of W; |dOmega_j| <= this times sum_k |dI_k|"""
    if convention is FrequencyConvention.PRINTED:
        return 2.0 * spec.C_K
    if spec.kind is KernelKind.POWER:
        return spec.C_K
    return kernel_coeff(spec, 0) + spec.C_K


def _state_on(u: FourierState, M: int) -> FourierState:
    if u.M == M:
        return u
    if u.M > M and (np.any(u.amplitudes[: u.M - M]) or np.any(u.amplitudes[u.M + M + 1:])):
        raise ModeOutOfRange("state has support beyond the mode cutoff", {'M': M, 'state_M': u.M})
    return u.pad_to(M)


def base_frequencies(spec: KernelSpec, u: FourierState, M: int,
                     convention: FrequencyConvention = FrequencyConvention.PRINTED) -> np.ndarray:
    """Per-site Omega_j(u) for |j| <= M"""
    return frequency_matrix(spec, M, convention) @ _state_on(u, M).actions


def _check_modes(J: Sequence[Tuple[int, int]], M: int) -> None:
    for j, _ in J:
        if abs(j) > M:
            raise ModeOutOfRange("multi-index entry beyond the mode cutoff", {'j': j, 'M': M})


def charge_vector(J: Sequence[Tuple[int, int]], M: int) -> np.ndarray:
    c = np.zeros(2 * M + 1, dtype=np.int64)
    for j, s in J:
        c[j + M] += s
    return c


def frequency(spec: KernelSpec, J: Sequence[Tuple[int, int]], u: FourierState, M: int,
              convention: FrequencyConvention = FrequencyConvention.PRINTED) -> float:
    """omega_J(u) = sum_alpha sigma_alpha Omega_{j_alpha}(u), real"""
    _check_modes(J, M)
    omega = base_frequencies(spec, u, M, convention)
    return float(charge_vector(J, M) @ omega)


def frequency_action_gradient(spec: KernelSpec, J: Sequence[Tuple[int, int]], jstar: int,
                              convention: FrequencyConvention = FrequencyConvention.PRINTED) -> float:
    """Exact coefficient of |u_{j*}|^2 in omega_J"""
    if convention is FrequencyConvention.PRINTED:
        return 2.0 * sum(s * kernel_coeff(spec, jstar - j) for j, s in J)
    K0 = kernel_coeff(spec, 0)
    return K0 * sum(s for _, s in J) + sum(s * kernel_coeff(spec, jstar - j) for j, s in J if j != jstar)


# ---------------------------------------------------------------------------
# Non-resonance margin over the reduced charge problem


@dataclass(frozen=True)
class NonResonanceParams:
    gamma: float              # non-resonance threshold
    M: int                    # mode cutoff
    d: int                    # degree budget; multi-indices of length 2d

    def __post_init__(self):
        if self.gamma < 0 or self.M < 1 or self.d < 1:
            raise DomainError("gamma >= 0, M >= 1 and d >= 1 required",
                              {'gamma': self.gamma, 'M': self.M, 'd': self.d})


def count_charge_vectors(n_sites: int, max_l1: int) -> int:
    """Number of integer vectors in Z^n with l1 norm <= max_l1"""
    return sum((2 ** k) * math.comb(n_sites, k) * math.comb(max_l1, k) for k in range(0, min(n_sites, max_l1) + 1))


@lru_cache(maxsize=16)
def charge_vectors(n_sites: int, max_l1: int, budget: Optional[int] = None) -> np.ndarray:
    """
    Nonzero integer vectors c with sum|c| <= max_l1 and sum|c| even,
    one representative per {c, -c} (first nonzero entry positive).
    """
    budget = budget or LEDGER.enumeration_budget
    total = count_charge_vectors(n_sites, max_l1)
    if total > budget:
        raise EnumerationOverflow("reduced charge enumeration exceeds the budget",
                                  {'n_sites': n_sites, 'max_l1': max_l1, 'count': total, 'budget': budget})
    rows = []

    def extend(prefix, remaining, started):
        position = len(prefix)
        if position == n_sites:
            if started and (max_l1 - remaining) % 2 == 0:
                rows.append(prefix)
            return
        low = 0 if not started else -remaining
        for value in range(low, remaining + 1):
            extend(prefix + (value,), remaining - abs(value), started or value != 0)

    extend((), max_l1, False)
    out = np.array(rows, dtype=np.int64).reshape(-1, n_sites)
    out.setflags(write=False)
    log.debug(f"enumerated {out.shape[0]} charge vectors for {n_sites} sites, l1 <= {max_l1}")
    return out


@lru_cache(maxsize=32)
def _admissible_charges(spec: KernelSpec, M: int, d: int, convention: FrequencyConvention,
                        budget: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Charge vectors whose frequency is not identically zero, with their action gradients"""
    C = charge_vectors(2 * M + 1, 2 * d, budget)
    W = frequency_matrix(spec, M, convention)
    G = C @ W
    scale = max(float(np.abs(W).max()), 1e-300)
    keep = np.abs(G).max(axis=1) > 1e-12 * scale
    return C[keep], G[keep]


@dataclass
class MarginResult:
    margin: float
    min_abs_omega: float
    threshold: float
    argmin: Optional[np.ndarray] = None

    def to_dict(self) -> Dict[str, Any]:
        return {'margin': self.margin, 'min_abs_omega': self.min_abs_omega, 'threshold': self.threshold,
                'argmin': None if self.argmin is None else self.argmin.tolist()}


def nonresonance_margin(spec: KernelSpec, u: FourierState, nr: NonResonanceParams, p: NormParams,
                        f: WeightFunction, convention: FrequencyConvention = FrequencyConvention.PRINTED,
                        return_argmin: bool = False, budget: Optional[int] = None):
    """
    min over non-identically-zero J in the length-2d index set of |omega_J(u)| - gamma N_s(u)^2.
    u lies in the non-resonant domain iff the result is > 0.
    """
    u = _state_on(u, nr.M)
    C, G = _admissible_charges(spec, nr.M, nr.d, convention, budget)
    threshold = nr.gamma * weighted_norm(u, p, f) ** 2
    if C.shape[0] == 0:
        result = MarginResult(-threshold, math.inf, threshold)
        return result if return_argmin else result.margin
    omega = np.abs(G @ u.actions)
    i = int(np.argmin(omega))
    result = MarginResult(float(omega[i] - threshold), float(omega[i]), threshold,
                          C[i].copy() if return_argmin else None)
    return result if return_argmin else result.margin


def min_abs_frequency(spec: KernelSpec, actions: np.ndarray, M: int, d: int,
                      convention: FrequencyConvention = FrequencyConvention.PRINTED) -> np.ndarray:
    """Vectorized min |omega_J| over the reduced set, for a batch of action vectors (rows)"""
    _, G = _admissible_charges(spec, M, d, convention, None)
    actions = np.atleast_2d(actions)
    out = np.empty(actions.shape[0])
    chunk = max(1, 4_000_000 // max(G.shape[0], 1))
    for start in range(0, actions.shape[0], chunk):
        block = np.abs(actions[start:start + chunk] @ G.T)
        out[start:start + chunk] = block.min(axis=1) if G.shape[0] else np.inf
    return out


def nonresonance_margin_bruteforce(spec: KernelSpec, u: FourierState, nr: NonResonanceParams, p: NormParams,
                                   f: WeightFunction,
                                   convention: FrequencyConvention = FrequencyConvention.PRINTED) -> float:
    """Enumerates every multiset of 2d indices with |j| <= M; small cases only"""
    u = _state_on(u, nr.M)
    sites = [(j, s) for j in range(-nr.M, nr.M + 1) for s in (1, -1)]
    omega_sites = base_frequencies(spec, u, nr.M, convention)
    scale = float(np.abs(frequency_matrix(spec, nr.M, convention)).max())
    best = math.inf
    for J in itertools.combinations_with_replacement(sites, 2 * nr.d):
        if is_action_type(J):
            continue
        grad = [frequency_action_gradient(spec, J, js, convention) for js in range(-nr.M, nr.M + 1)]
        if max(abs(g) for g in grad) <= 1e-12 * scale:
            continue
        best = min(best, abs(sum(s * omega_sites[j + nr.M] for j, s in J)))
    return best - nr.gamma * weighted_norm(u, p, f) ** 2


# ---------------------------------------------------------------------------
# Derivative lower bounds and the Lipschitz property


def exponential_gradient_constant() -> float:
    """C_e = (e - 2)/(e - 1)"""
    return (math.e - 2.0) / (math.e - 1.0)


def convention_scale(convention: FrequencyConvention) -> float:
    return 2.0 if convention is FrequencyConvention.PRINTED else 1.0


def power_law_gradient_bound(p: int, d: int, J: Sequence[Tuple[int, int]],
                             convention: FrequencyConvention = FrequencyConvention.PRINTED, c: float = 1.0) -> float:
    """scale / ((4pd)^{2dp} prod_l <j_l>^p), computed in log space"""
    log_den = 2 * d * p * math.log(4 * p * d) + p * sum(math.log(max(abs(j), c)) for j, _ in J)
    return convention_scale(convention) * math.exp(-log_den)


@dataclass
class LipschitzReport:
    n_pairs: int
    worst_slack: float
    violations: int
    printed_violations: int
    constant: float

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> Dict[str, Any]:
        return {'n_pairs': self.n_pairs, 'worst_slack': self.worst_slack, 'violations': self.violations,
                'printed_violations': self.printed_violations, 'constant': self.constant, 'passed': self.passed}


def lipschitz_rhs(spec: KernelSpec, d: int, u: FourierState, v: FourierState, p: NormParams, f: WeightFunction,
                  convention: FrequencyConvention = FrequencyConvention.PRINTED, printed: bool = False) -> float:
    """2 d w max(N_s(u), N_s(u')) N_s(u - u'); printed=True puts |N_s(u) - N_s(u')| in the last factor"""
    Nu, Nv = weighted_norm(u, p, f), weighted_norm(v, p, f)
    if printed:
        last = abs(Nu - Nv)
    else:
        last = weighted_norm(FourierState(u.amplitudes - v.amplitudes), p, f)
    return 2.0 * d * lipschitz_constant(spec, convention) * max(Nu, Nv) * last


def lipschitz_check(spec: KernelSpec, M: int, d: int, n_pairs: int, p: NormParams, f: WeightFunction,
                    rng: np.random.Generator,
                    convention: FrequencyConvention = FrequencyConvention.PRINTED) -> LipschitzReport:
    """
    |omega_J(u) - omega_J(u')| <= 2 d w max(N_s(u), N_s(u')) N_s(u - u'), w = lipschitz_constant.
    The displayed variant with |N_s(u) - N_s(u')| is counted in printed_violations and does not gate:
    it fails whenever mass moves between modes at equal norm.
    """
    w = lipschitz_constant(spec, convention)
    W = frequency_matrix(spec, M, convention)
    n = 2 * M + 1
    worst, violations, printed_violations = math.inf, 0, 0
    for _ in range(n_pairs):
        scale = rng.uniform(0.01, 1.0, size=2)
        a = (rng.normal(size=n) + 1j * rng.normal(size=n)) * scale[0] / n
        b = (rng.normal(size=n) + 1j * rng.normal(size=n)) * scale[1] / n
        u, v = FourierState(a), FourierState(b)
        sites = rng.integers(-M, M + 1, size=d)
        signs = rng.choice([1, -1], size=d)
        c = charge_vector(list(zip(sites.tolist(), signs.tolist())), M)
        lhs = abs(float(c @ (W @ (u.actions - v.actions))))
        rhs = lipschitz_rhs(spec, d, u, v, p, f, convention)
        slack = rhs - lhs
        worst = min(worst, slack)
        violations += slack < -1e-12 * max(rhs, 1.0)
        printed_violations += lhs > lipschitz_rhs(spec, d, u, v, p, f, convention, printed=True) + 1e-12
    return LipschitzReport(n_pairs, float(worst), int(violations), int(printed_violations), w)
