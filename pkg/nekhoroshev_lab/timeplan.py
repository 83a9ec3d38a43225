"""
Time Plan - Normal-Form Laboratory
Lambert W on the lower branch and the four parameter regimes, all times kept in log space
"""

import math
import sys
import warnings
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd
from scipy.optimize import brentq

from .config import LEDGER
from .errors import AdmissibilityWarning, BranchDomainError, DomainError, NoConvergence
from .logging_setup import get_logger

log = get_logger("timeplan")

BRANCH_POINT = -1.0 / math.e


def lambert_w_m1(y: float, tol: float = 1e-15, max_iter: int = 100) -> float:
    """
    Lower real branch: x <= -1 with x e^x = y for y in [-1/e, 0).
    Halley iteration seeded by ln(-y) - ln(-ln(-y)), or by the branch-point series near -1/e.
    """
    if not BRANCH_POINT <= y < 0.0:
        raise BranchDomainError("W_{-1} needs -1/e <= y < 0", {'y': y})
    if y == BRANCH_POINT:
        return -1.0
    if y < -0.25:
        q = -math.sqrt(max(2.0 * (1.0 + math.e * y), 0.0))
        x = -1.0 + q - q * q / 3.0
    else:
        L1 = math.log(-y)
        x = L1 - math.log(-L1)
    for _ in range(max_iter):
        ex = math.exp(x)
        f = x * ex - y
        if abs(f) <= 8.0 * sys.float_info.epsilon * abs(y):
            return x
        step = f / (ex * (x + 1.0) - (x + 2.0) * f / (2.0 * x + 2.0))
        x_new = min(x - step, -1.0)
        if abs(x_new - x) <= tol * abs(x_new):
            return x_new
        x = x_new
    raise NoConvergence("Lambert W_{-1} iteration did not converge", {'y': y, 'x': x})


# ---------------------------------------------------------------------------
# Regimes


class Regime(Enum):
    GEVREY_POWER = "gevrey_power"
    GEVREY_EXP = "gevrey_exp"
    ULTRA_POWER = "ultra_power"
    ULTRA_EXP = "ultra_exp"

    @property
    def gevrey(self) -> bool:
        return self in (Regime.GEVREY_POWER, Regime.GEVREY_EXP)

    @property
    def power(self) -> bool:
        return self in (Regime.GEVREY_POWER, Regime.ULTRA_POWER)


def measure_constant() -> float:
    """C_m = 4 max{C_K C2^2, C_K C2, C_K C1} with C_K = 1"""
    return 4.0 * max(LEDGER.C2 ** 2, LEDGER.C2, LEDGER.C1)


@dataclass(frozen=True)
class RegimeParams:
    regime: Regime
    d: int
    iota: float
    a: float
    s: float = 1.0
    weight_parameter: float = 0.5       # g for the Gevrey regimes, theta for the ultra regimes
    kernel_parameter: float = 1.0       # p for the power law, also the witness reach (p+1) d for the exponential
    C_m: float = field(default_factory=measure_constant)
    # derived, natural logs
    log_r: Optional[float] = None
    log_gamma: Optional[float] = None
    log_kappa: Optional[float] = None
    log_M: Optional[float] = None
    lambert_argument: Optional[float] = None
    plug_back_residual: Optional[float] = None

    @property
    def derived(self) -> bool:
        return self.log_M is not None

    @property
    def r(self) -> float:
        return math.exp(self.log_r)

    @property
    def gamma(self) -> float:
        return math.exp(self.log_gamma)

    @property
    def kappa(self) -> float:
        return math.exp(self.log_kappa)

    @property
    def M(self) -> float:
        return math.exp(self.log_M) if self.log_M < 700 else math.inf

    @property
    def M_int(self) -> Optional[int]:
        return int(math.ceil(self.M)) if math.isfinite(self.M) else None

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out['regime'] = self.regime.value
        return out


def regime_constant(rp: RegimeParams) -> float:
    """C_{a,p} or C_{s,p,g,a}, as printed; may be non-positive"""
    if rp.regime.gevrey and rp.regime.power:
        return ((1.0 - rp.iota) / 5.0 + rp.a * rp.iota) * 4.0 * (rp.kernel_parameter + 1.0)
    if rp.regime is Regime.GEVREY_EXP:
        return 3.0 - 3.0 * rp.iota + 3.0 * rp.a * rp.iota
    return 1.0


def admissibility_window(rp: RegimeParams) -> float:
    """Upper end of the allowed range for a"""
    if rp.regime.power:
        return (1.0 - 1.0 / rp.iota) / 5.0
    return 1.0 - 1.0 / rp.iota


def _admissibility_warnings(rp: RegimeParams) -> List[str]:
    issues = []
    window = admissibility_window(rp)
    if not rp.a < window:
        issues.append(f"a = {rp.a} outside its window a < {window:.6g}")
    if rp.regime.gevrey:
        C = regime_constant(rp)
        if C <= 0:
            issues.append(f"regime constant {C:.6g} is non-positive")
    for message in issues:
        log.warning(f"{rp.regime.value}: {message}")
        warnings.warn(message, AdmissibilityWarning, stacklevel=3)
    return issues


def _log_scales(rp: RegimeParams, log_M: float) -> Dict[str, float]:
    """log r, log kappa, log gamma for a given log M"""
    d, p = rp.d, rp.kernel_parameter
    if rp.regime.power:
        L = 2.0 * d * (p + 1.0) * (math.log(4.0 * p * d) + log_M)
    elif rp.regime is Regime.GEVREY_EXP:
        L = rp.s * ((p + 1.0) * d) ** rp.weight_parameter + 3.0 * d * log_M
    else:
        L = 3.0 * d * log_M + math.log((p + 1.0) * d) ** rp.weight_parameter
    log_r = -rp.iota * L
    log_kappa = rp.a * log_r
    return {'log_r': log_r, 'log_kappa': log_kappa, 'log_gamma': log_kappa - L}


def select_params(rp: RegimeParams) -> RegimeParams:
    """Fills r, gamma, kappa and M from the regime's closed forms"""
    _admissibility_warnings(rp)
    d, g = rp.d, rp.weight_parameter
    y, residual = None, None
    if rp.regime is Regime.GEVREY_POWER:
        C = regime_constant(rp)
        y = -g / (2.0 * C * d ** (2.0 + g)) if C > 0 else math.inf
        W = lambert_w_m1(y)
        log_M = -math.log(d) - 2.0 / g * W
        X = g / 2.0 * (log_M + math.log(d))
        residual = abs(X * math.exp(-X) + y) / abs(y)
    elif rp.regime is Regime.GEVREY_EXP:
        C = regime_constant(rp)
        y = -g / (C * d ** (2.0 + g / 2.0)) if C > 0 else math.inf
        W = lambert_w_m1(y)
        log_M = -2.0 / g * W
        X = g / 2.0 * log_M
        residual = abs(X * math.exp(-X) + y) / abs(y)
    else:
        theta = g
        log_M = math.log(d) + d ** (2.0 / (theta - 1.0))
        residual = abs((log_M - math.log(d)) ** (theta - 1.0) / d ** 2 - 1.0)
    out = replace(rp, log_M=log_M, lambert_argument=y, plug_back_residual=residual, **_log_scales(rp, log_M))
    log.debug(f"{rp.regime.value} d={d}: log M={log_M:.6g}, log r={out.log_r:.6g}, residual={residual:.2e}")
    return out


def bootstrap_radius(rp: RegimeParams) -> float:
    """log of C_m r^{1/5} / gamma"""
    return math.log(rp.C_m) + rp.log_r / 5.0 - rp.log_gamma


def balance_residual(rp: RegimeParams) -> float:
    """d log(frak_r) + d log d + (M/d)^{g/2} (Gevrey) or (log(M/d))^theta (ultra); zero at exact balance"""
    return _balance(rp, rp.log_M)


def _balance(rp: RegimeParams, log_M: float) -> float:
    d = rp.d
    scales = _log_scales(rp, log_M)
    log_frak = math.log(rp.C_m) + scales['log_r'] / 5.0 - scales['log_gamma']
    if rp.regime.gevrey:
        decay = math.exp(min(rp.weight_parameter / 2.0 * (log_M - math.log(d)), 700.0))
    else:
        decay = max(log_M - math.log(d), 0.0) ** rp.weight_parameter
    return d * log_frak + d * math.log(d) + decay


def exact_balance_M(rp: RegimeParams, log_M_max: float = 700.0) -> Optional[float]:
    """Root in log M of the undropped balance by brentq; None when the balance has no sign change"""
    lo = math.log(rp.d) + 1e-9
    grid = [lo + (log_M_max - lo) * (k / 64.0) ** 2 for k in range(65)]
    values = [_balance(rp, x) for x in grid]
    for (x0, f0), (x1, f1) in zip(zip(grid, values), zip(grid[1:], values[1:])):
        if f0 == 0.0:
            return x0
        if f0 * f1 < 0:
            return float(brentq(lambda x: _balance(rp, x), x0, x1, xtol=1e-12))
    log.warning(f"{rp.regime.value} d={rp.d}: undropped balance has no root below log M = {log_M_max}")
    return None


def stability_constant(rp: RegimeParams) -> float:
    g, p, iota = rp.weight_parameter, rp.kernel_parameter, rp.iota
    if rp.regime is Regime.GEVREY_POWER:
        return regime_constant(rp) / (2.0 * iota ** 2 * (p + 1.0) ** 2 * g * (2.0 + g))
    if rp.regime is Regime.GEVREY_EXP:
        return regime_constant(rp) / g * (g / (6.0 * iota)) ** 2
    exponent = 2.0 * g / (g + 1.0)
    if rp.regime is Regime.ULTRA_POWER:
        return (2.0 * iota * (p + 1.0)) ** (-exponent)
    return (3.0 * iota) ** (-exponent)


def stability_time(rp: RegimeParams) -> float:
    """log T_r; T_r itself is never formed"""
    ln_r = abs(rp.log_r)
    C = stability_constant(rp)
    if rp.regime.gevrey:
        return C * ln_r ** 2 / math.log(ln_r)
    return C * ln_r ** (2.0 * rp.weight_parameter / (rp.weight_parameter + 1.0))


def asymptotic_ratio(rp: RegimeParams) -> float:
    """(M/d)^{g/2} log|log r| / |log r|^2, or (log(M/d))^theta / |log r|^{2 theta/(theta+1)}"""
    ln_r = abs(rp.log_r)
    log_ratio_M = rp.log_M - math.log(rp.d)
    g = rp.weight_parameter
    if rp.regime.gevrey:
        return math.exp(g / 2.0 * log_ratio_M + math.log(math.log(ln_r)) - 2.0 * math.log(ln_r))
    return log_ratio_M ** g / ln_r ** (2.0 * g / (g + 1.0))


def limit_constant(rp: RegimeParams) -> float:
    """Limit of asymptotic_ratio as d grows, from the closed forms of M and r"""
    g, p, iota = rp.weight_parameter, rp.kernel_parameter, rp.iota
    if rp.regime is Regime.GEVREY_POWER:
        return regime_constant(rp) * g / (8.0 * iota ** 2 * (p + 1.0) ** 2 * (2.0 + g))
    if rp.regime is Regime.GEVREY_EXP:
        return regime_constant(rp) * g / (36.0 * iota ** 2 * (2.0 + g / 2.0))
    return stability_constant(rp)


@dataclass
class AsymptoticReport:
    regime: str
    d_grid: List[int]
    ratios: List[float]
    limit: float
    printed_constant: float

    @property
    def gaps(self) -> List[float]:
        return [abs(x - self.limit) / abs(self.limit) for x in self.ratios]

    @property
    def increments(self) -> List[float]:
        return [abs(b - a) for a, b in zip(self.ratios, self.ratios[1:])]

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out.update({'gaps': self.gaps, 'increments': self.increments})
        return out


def asymptotic_constant(base: RegimeParams, d_grid: Sequence[int]) -> AsymptoticReport:
    """Ratios at each d from the derived quantities, with the limit and the stability constant used for T_r"""
    if list(d_grid) != sorted(set(d_grid)):
        raise DomainError("d_grid must be strictly increasing", {"d_grid": [int(d) for d in d_grid]})
    ratios = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AdmissibilityWarning)
        for d in d_grid:
            ratios.append(asymptotic_ratio(select_params(replace(base, d=int(d)))))
    report = AsymptoticReport(base.regime.value, [int(d) for d in d_grid], ratios, limit_constant(base),
                              stability_constant(base))
    if not math.isclose(report.limit, report.printed_constant, rel_tol=1e-9):
        log.info(f"{base.regime.value}: ratio limit {report.limit:.6g} differs from the stability "
                 f"constant {report.printed_constant:.6g}")
    return report


def regime_sweep(base: RegimeParams, d_grid: Sequence[int]) -> pd.DataFrame:
    """Rows d, r, gamma, kappa, M, logT, ratio plus the log columns the floats underflow on"""
    _admissibility_warnings(base)
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AdmissibilityWarning)
        for d in d_grid:
            rp = select_params(replace(base, d=int(d)))
            rows.append({'d': rp.d, 'r': rp.r, 'gamma': rp.gamma, 'kappa': rp.kappa, 'M': rp.M,
                         'logT': stability_time(rp), 'ratio': asymptotic_ratio(rp), 'log_r': rp.log_r,
                         'log_gamma': rp.log_gamma, 'log_M': rp.log_M, 'log_bootstrap_radius': bootstrap_radius(rp),
                         'plug_back_residual': rp.plug_back_residual})
    return pd.DataFrame(rows)
