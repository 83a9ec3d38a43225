"""
Measure - Normal-Form Laboratory
Uniform sampling of the weighted l1 ball, Monte-Carlo resonant fractions and exact small-case volume identities
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .errors import DomainError
from .kernel import (FrequencyConvention, KernelKind, KernelSpec, NonResonanceParams, charge_vectors,
                     exponential_gradient_constant, min_abs_frequency, power_law_gradient_bound)
from .lattice import FourierState, WeightFunction, sample_ball_amplitudes, weight_vector
from .logging_setup import get_logger

log = get_logger("measure")


class Threshold(Enum):
    OMEGA_3GAMMA = "omega_3gamma"       # |omega| <= 3 gamma on the unit ball
    GAMMA_NORM2 = "gamma_norm2"         # |omega| <= 3 gamma N_s(u)^2 on B(r)


class RadiusNormalization(Enum):
    UNIT_BALL = "unit_ball"
    RADIUS = "radius"


@dataclass(frozen=True)
class BallSampler:
    M: int                              # mode cutoff (M = 0 gives one complex coordinate)
    s: float                            # weight scale
    f: WeightFunction                   # weight function
    r: float                            # radius
    seed: int = 0                       # RNG seed

    def __post_init__(self):
        if self.M < 0 or self.r <= 0 or self.s <= 0:
            raise DomainError("M >= 0, r > 0 and s > 0 required", {'M': self.M, 'r': self.r, 's': self.s})

    @property
    def n(self) -> int:
        """complex dimension"""
        return 2 * self.M + 1

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)

    def batch(self, n_samples: int, rng: Optional[np.random.Generator] = None, r: Optional[float] = None) -> np.ndarray:
        return sample_ball_amplitudes(self.M, self.s, self.f, self.r if r is None else r, n_samples,
                                      rng or self.rng())

    def norms(self, amplitudes: np.ndarray) -> np.ndarray:
        return np.abs(amplitudes) @ weight_vector(self.M, self.s, self.f)


def sample_ball(b: BallSampler, rng: Optional[np.random.Generator] = None) -> FourierState:
    """One uniform state of {N_s(u) <= r}"""
    return FourierState(b.batch(1, rng)[0])


def radial_mean_prediction(n: int) -> float:
    """E[N_s(u)/r] = 2n/(2n+1) for the uniform ball in C^n"""
    return 2.0 * n / (2.0 * n + 1.0)


# ---------------------------------------------------------------------------
# Resonant fraction


@dataclass
class FractionEstimate:
    gamma: float
    fraction: float
    ci_low: float
    ci_high: float
    n_samples: int
    seed: int

    @property
    def sigma(self) -> float:
        return math.sqrt(max(self.fraction * (1.0 - self.fraction), 0.0) / self.n_samples)

    def to_dict(self) -> Dict[str, Any]:
        return {'gamma': self.gamma, 'fraction': self.fraction, 'ci_low': self.ci_low, 'ci_high': self.ci_high,
                'n_samples': self.n_samples, 'seed': self.seed}


def wilson_interval(k: int, n: int, confidence: float = 0.95) -> tuple:
    z = float(stats.norm.ppf(0.5 + confidence / 2.0))
    p = k / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def _scaled_min_frequencies(spec: KernelSpec, M: int, d: int, b: BallSampler, n_samples: int,
                            threshold: Threshold, normalization: RadiusNormalization) -> np.ndarray:
    """min |omega| per sample divided by the threshold scale, so resonance reads value <= 3 gamma"""
    if b.M != M:
        raise DomainError("sampler and non-resonance parameters disagree on M", {'sampler': b.M, 'M': M})
    unit = threshold is Threshold.OMEGA_3GAMMA and normalization is RadiusNormalization.UNIT_BALL
    amplitudes = b.batch(n_samples, r=1.0 if unit else b.r)
    omega = min_abs_frequency(spec, np.abs(amplitudes) ** 2, M, d, FrequencyConvention.PRINTED)
    if threshold is Threshold.GAMMA_NORM2:
        return omega / np.maximum(b.norms(amplitudes) ** 2, 1e-300)
    return omega if unit else omega / b.r ** 2


def resonant_fraction(spec: KernelSpec, nr: NonResonanceParams, b: BallSampler, n_samples: int,
                      threshold: Threshold = Threshold.OMEGA_3GAMMA,
                      normalization: RadiusNormalization = RadiusNormalization.UNIT_BALL) -> FractionEstimate:
    """Fraction of uniform samples with some |omega_c| at or below the 3 gamma threshold, Wilson interval attached"""
    if n_samples < 100:
        raise DomainError("resonant fraction needs at least 100 samples", {'n_samples': n_samples})
    values = _scaled_min_frequencies(spec, nr.M, nr.d, b, n_samples, threshold, normalization)
    hits = int(np.sum(values <= 3.0 * nr.gamma))
    low, high = wilson_interval(hits, n_samples)
    return FractionEstimate(nr.gamma, hits / n_samples, low, high, n_samples, b.seed)


def gamma_sweep(spec: KernelSpec, M: int, d: int, b: BallSampler, gammas: Sequence[float], n_samples: int,
                threshold: Threshold = Threshold.OMEGA_3GAMMA,
                normalization: RadiusNormalization = RadiusNormalization.UNIT_BALL) -> pd.DataFrame:
    """Resonant fractions on one fixed sample set, so the fraction column is monotone in gamma"""
    values = _scaled_min_frequencies(spec, M, d, b, n_samples, threshold, normalization)
    rows = []
    for gamma in sorted(gammas):
        hits = int(np.sum(values <= 3.0 * gamma))
        low, high = wilson_interval(hits, n_samples)
        rows.append({'gamma': gamma, 'fraction': hits / n_samples, 'ci_low': low, 'ci_high': high,
                     'n_samples': n_samples, 'seed': b.seed})
    log.info(f"gamma sweep over {len(rows)} values, {n_samples} samples, threshold={threshold.value}")
    return pd.DataFrame(rows, columns=['gamma', 'fraction', 'ci_low', 'ci_high', 'n_samples', 'seed'])


# ---------------------------------------------------------------------------
# Derivative lower bounds


@dataclass
class DerivativeBoundReport:
    kernel: str
    d: int
    M: int
    n_checked: int
    n_skipped: int
    worst_ratio: float
    failures: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> Dict[str, Any]:
        return {'kernel': self.kernel, 'd': self.d, 'M': self.M, 'n_checked': self.n_checked,
                'n_skipped': self.n_skipped, 'worst_ratio': self.worst_ratio, 'failures': self.failures[:20],
                'passed': self.passed}


def _entries(charge: np.ndarray, M: int) -> List[tuple]:
    out = []
    for i, c in enumerate(charge.tolist()):
        out.extend([(i - M, 1 if c > 0 else -1)] * abs(c))
    return out


def derivative_lower_bound_check(spec: KernelSpec, d: int, M: int,
                                 budget: Optional[int] = None) -> DerivativeBoundReport:
    """
    For every reduced non-action charge of length <= 2d, looks for a witness j* whose
    action derivative of omega meets the kernel's lower bound: 2 C_e at an unpaired site
    for the exponential kernel, the (4pd)^{2dp} bound over |j*| <= (p+1) d for the power law.
    """
    C = charge_vectors(2 * M + 1, 2 * d, budget)
    power = spec.kind is KernelKind.POWER
    if power:
        p = int(spec.parameter)
        reach = max((p + 1) * d, M)
    else:
        reach = M
    sites = np.arange(-reach, reach + 1)
    modes = np.arange(-M, M + 1)
    # gradient of omega_c at every candidate j*, printed convention
    A = 2.0 * np.array([[spec.coeff(js - j) for j in modes] for js in sites])
    grads = C @ A.T
    scale = float(np.abs(A).max())
    floor = 2.0 * exponential_gradient_constant()
    worst, skipped, failures = math.inf, 0, []
    for c, g in zip(C, grads):
        if np.abs(g).max() <= 1e-12 * scale:
            skipped += 1
            continue
        if power:
            allowed = np.abs(sites) <= (int(spec.parameter) + 1) * d
            bound = power_law_gradient_bound(int(spec.parameter), d, _entries(c, M))
        else:
            allowed = np.isin(sites, modes[c != 0])
            bound = floor
        best = float(np.abs(g[allowed]).max())
        ratio = best / bound
        worst = min(worst, ratio)
        if ratio < 1.0 - 1e-12:
            failures.append({'charge': c.tolist(), 'best': best, 'bound': bound})
    report = DerivativeBoundReport(spec.kind.value, d, M, int(C.shape[0]) - skipped, skipped, float(worst), failures)
    log.info(f"derivative lower bound: {report.n_checked} charges, worst ratio {report.worst_ratio:.3e}, "
             f"{len(failures)} failures")
    return report


# ---------------------------------------------------------------------------
# Volume identities and uniformity


@dataclass
class VolumeReport:
    n: int
    K: int
    jstar: int
    exact_normalizer: float
    printed_normalizer: float
    weight_factor: float
    thresholds: List[float]
    mc_fractions: List[float]
    exact_fractions: List[float]
    sigma: float
    note: str

    @property
    def max_error(self) -> float:
        return max(abs(a - b) for a, b in zip(self.mc_fractions, self.exact_fractions))

    @property
    def passed(self) -> bool:
        return self.max_error <= 4.0 * self.sigma

    def to_dict(self) -> Dict[str, Any]:
        out = dict(self.__dict__)
        out.update({'max_error': self.max_error, 'passed': self.passed})
        return out


def volume_identity_check(b: BallSampler, jstar: int, n_samples: int = 20000,
                          thresholds: Sequence[float] = (0.1, 0.25, 0.5)) -> VolumeReport:
    """
    Fibering over |u_j*|: y = e^{s f(<j*>)} |u_j*| / r is Beta(2, K+1) with K the real dimension
    of the remaining coordinates, so P(y <= t) is a Beta integral with normalizer 1/((K+1)(K+2)).
    """
    if abs(jstar) > b.M:
        raise DomainError("j* outside the sampler's modes", {'jstar': jstar, 'M': b.M})
    amplitudes = b.batch(n_samples)
    w = weight_vector(b.M, b.s, b.f)
    y = w[jstar + b.M] * np.abs(amplitudes[:, jstar + b.M]) / b.r
    K = 2 * b.n - 2
    law = stats.beta(2, K + 1)
    mc = [float(np.mean(y <= t)) for t in thresholds]
    exact = [float(law.cdf(t)) for t in thresholds]
    sigma = max(math.sqrt(p * (1 - p) / n_samples) for p in exact)
    printed_modes = max(b.M, 1)
    note = (f"real dimension count K = {K} for {b.n} complex modes; the printed normalizer "
            f"1/(4M(4M+1)) corresponds to K = 4M - 1 = {4 * printed_modes - 1}, and its 4d/4M bookkeeping "
            f"is not replicated")
    return VolumeReport(b.n, K, jstar, 1.0 / ((K + 1) * (K + 2)), 1.0 / (4 * printed_modes * (4 * printed_modes + 1)),
                        1.0 / float(w[jstar + b.M]), list(thresholds), mc, exact, sigma, note)


@dataclass
class KSReport:
    statistic: float
    p_value: float

    def to_dict(self) -> Dict[str, Any]:
        return {'statistic': self.statistic, 'p_value': self.p_value}


def marginal_ks_check(b: BallSampler, jstar: int = 0, n_samples: int = 5000) -> KSReport:
    """Kolmogorov-Smirnov test of the scaled modulus of u_j* against Beta(2, K+1)"""
    amplitudes = b.batch(n_samples)
    w = weight_vector(b.M, b.s, b.f)
    y = w[jstar + b.M] * np.abs(amplitudes[:, jstar + b.M]) / b.r
    result = stats.kstest(y, stats.beta(2, 2 * b.n - 1).cdf)
    return KSReport(float(result.statistic), float(result.pvalue))


def uniformity_chi2(b: BallSampler, n_samples: int = 10000, bins: int = 10) -> Dict[str, Any]:
    """
    Chi-square tests over equal-probability cells of the radial share N_s/r ~ Beta(2n, 1)
    and of the first simplex coordinate ~ Beta(2, 2n-1); reports the smaller p-value.
    """
    amplitudes = b.batch(n_samples)
    radial = b.norms(amplitudes) / b.r
    w = weight_vector(b.M, b.s, b.f)
    first = w[0] * np.abs(amplitudes[:, 0]) / b.r
    p_values = {}
    for name, values, law in (('radial', radial, stats.beta(2 * b.n, 1)), ('first', first, stats.beta(2, 2 * b.n - 1))):
        edges = law.ppf(np.linspace(0.0, 1.0, bins + 1))
        edges[0], edges[-1] = -np.inf, np.inf
        counts, _ = np.histogram(values, bins=edges)
        p_values[name] = float(stats.chisquare(counts).pvalue)
    return {'p_values': p_values, 'p_value': min(p_values.values()), 'n_samples': n_samples, 'bins': bins}


def radial_mean_check(b: BallSampler, n_samples: int = 10000) -> Dict[str, Any]:
    """Empirical mean of N_s/r against 2n/(2n+1) with its standard error"""
    radial = b.norms(b.batch(n_samples)) / b.r
    mean = float(radial.mean())
    error = float(radial.std(ddof=1) / math.sqrt(n_samples))
    expected = radial_mean_prediction(b.n)
    return {'mean': mean, 'expected': expected, 'std_error': error, 'z': (mean - expected) / error if error else 0.0}


def ball_contains(b: BallSampler, u: FourierState) -> bool:
    return float(b.norms(u.amplitudes[None, :])[0]) <= b.r * (1.0 + 1e-12)
