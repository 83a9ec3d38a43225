"""
Simulator - Normal-Form Laboratory
Split-step integration of the mode-truncated non-local NLS, conservation diagnostics and the bootstrap statistic
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import fft as sfft
from scipy import linalg, stats

from .config import THREADS
from .errors import DomainError, StepUnstable
from .kernel import KernelSpec, NonResonanceParams, nonresonance_margin
from .lattice import FourierState, NormParams, WeightFunction, sample_ball_amplitudes, weight_vector, weighted_norm
from .logging_setup import get_logger
from .poly import PolyHamiltonian, build_hamiltonian

log = get_logger("simulator")

HORIZON_BANNER = ("stability times of the theory are far beyond reachable horizons; "
                  "this report covers the bootstrap statistic on the simulated horizon only")


class Scheme(Enum):
    STRANG = "strang"
    LIE = "lie"


@dataclass(frozen=True)
class SimConfig:
    M_sim: int                          # mode cutoff |k| <= M_sim
    dt: float                           # time step
    T_end: float                        # horizon
    scheme: Scheme = Scheme.STRANG
    observer_stride: int = 10           # steps between observations

    def __post_init__(self):
        if self.dt <= 0 or self.M_sim < 1 or self.T_end < 0 or self.observer_stride < 1:
            raise DomainError("dt > 0, M_sim >= 1, T_end >= 0 and observer_stride >= 1 required",
                              {'dt': self.dt, 'M_sim': self.M_sim, 'T_end': self.T_end})

    @property
    def n_steps(self) -> int:
        return int(round(self.T_end / self.dt))


# ---------------------------------------------------------------------------
# Grid transforms


def padded_size(M: int) -> int:
    """Odd grid on which |u|^2 (modes up to 2M) and the projection of V u onto |k| <= M are alias free"""
    return 4 * M + 1


def to_grid(u: FourierState, N: Optional[int] = None) -> np.ndarray:
    """u(x_n) = sum_k u_k e^{i k x_n}, x_n = 2 pi n / N; N odd, 2M+1 by default"""
    a = u.amplitudes
    N = a.size if N is None else N
    if N < a.size or N % 2 == 0:
        raise DomainError("grid size must be odd and at least 2M+1", {'N': N, 'M': u.M})
    L = (N - 1) // 2
    padded = np.zeros(N, dtype=complex)
    padded[L - u.M:L + u.M + 1] = a
    return N * sfft.ifft(sfft.ifftshift(padded), workers=THREADS)


def from_grid(values: np.ndarray, M: Optional[int] = None) -> FourierState:
    """Fourier coefficients of grid values, projected onto |k| <= M (all grid modes by default)"""
    N = values.size
    L = (N - 1) // 2
    M = L if M is None else M
    if M > L:
        raise DomainError("projection wider than the grid", {'N': N, 'M': M})
    coeffs = sfft.fftshift(sfft.fft(values, workers=THREADS)) / N
    return FourierState(coeffs[L - M:L + M + 1])


@lru_cache(maxsize=32)
def _multiplier(spec: KernelSpec, N: int) -> np.ndarray:
    """K_|m| in FFT frequency order on an N-point grid"""
    m = np.rint(sfft.fftfreq(N, d=1.0 / N)).astype(int)
    return np.array([spec.coeff(abs(int(k))) for k in m])


@lru_cache(maxsize=32)
def _kernel_row(spec: KernelSpec, M: int) -> np.ndarray:
    """K_|m| for m = -2M..2M"""
    return np.array([spec.coeff(abs(m)) for m in range(-2 * M, 2 * M + 1)])


def _wavenumbers(M: int) -> np.ndarray:
    return np.arange(-M, M + 1, dtype=float)


def density_modes(u: FourierState) -> np.ndarray:
    """rho_m = sum_b u_{b+m} conj(u_b) for m = -2M..2M, the Fourier modes of |u|^2"""
    a = u.amplitudes
    return np.correlate(a, a, mode='full')


def nonlinear_potential(u: FourierState, spec: KernelSpec) -> np.ndarray:
    """V = K * |u|^2 on the padded grid of 4M+1 points"""
    N = padded_size(u.M)
    density = np.abs(to_grid(u, N)) ** 2
    rho = sfft.fft(density, workers=THREADS) / N
    return np.real(N * sfft.ifft(_multiplier(spec, N) * rho, workers=THREADS))


def nonlinear_potential_direct(u: FourierState, spec: KernelSpec) -> np.ndarray:
    """Same potential summed mode by mode from rho_m on the same padded grid"""
    M = u.M
    N = padded_size(M)
    x = 2.0 * np.pi * np.arange(N) / N
    m = np.arange(-2 * M, 2 * M + 1)
    return np.real(np.exp(1j * np.outer(x, m)) @ (_kernel_row(spec, M) * density_modes(u)))


def nonlinear_field(u: FourierState, spec: KernelSpec) -> np.ndarray:
    """dH_nl/d conj(u_k) = P_M(V u)_k = sum_m K_m rho_m u_{k-m}"""
    return from_grid(nonlinear_potential(u, spec) * to_grid(u, padded_size(u.M)), u.M).amplitudes


def potential_matrix(rho: np.ndarray, spec: KernelSpec, M: int) -> np.ndarray:
    """L_kl = K_{k-l} rho_{k-l} on |k|, |l| <= M; Hermitian Toeplitz, L u = nonlinear_field when rho = rho(u)"""
    Vhat = _kernel_row(spec, M) * rho
    centre = 2 * M
    return linalg.toeplitz(Vhat[centre:], Vhat[centre::-1])


@lru_cache(maxsize=8)
def _hamiltonian(spec: KernelSpec, M: int) -> PolyHamiltonian:
    return build_hamiltonian(spec, M)


def truncated_energy(u: FourierState, spec: KernelSpec) -> float:
    """H of the mode-truncated system on |k| <= M"""
    return float(_hamiltonian(spec, u.M).evaluate(u).real)


# ---------------------------------------------------------------------------
# Steps; the drift is an exact phase, the kick a unitary solve

KICK_MAX_ITER = 60
KICK_FALLBACK_TOL = 1e-10


def _drift(u: FourierState, tau: float) -> FourierState:
    k = _wavenumbers(u.M)
    return FourierState(u.amplitudes * np.exp(-1j * k * k * tau))


def _propagate(L: np.ndarray, tau: float, a: np.ndarray) -> np.ndarray:
    w, Q = linalg.eigh(L)
    return Q @ (np.exp(-1j * tau * w) * (Q.conj().T @ a))


def _kick(u: FourierState, tau: float, spec: KernelSpec) -> FourierState:
    """
    u1 = exp(-i tau L(rho_bar)) u0, rho_bar = (rho(u0) + rho(u1)) / 2, solved by fixed-point iteration.
    Unitary, and the map at -tau inverts the map at tau.
    """
    a = u.amplitudes
    scale = float(np.max(np.abs(a)))
    if tau == 0 or scale == 0:
        return u
    rho0 = density_modes(u)
    tol = 8.0 * np.finfo(float).eps * scale
    b, diff = a, math.inf
    for _ in range(KICK_MAX_ITER):
        rho = 0.5 * (rho0 + np.correlate(b, b, mode='full'))
        nxt = _propagate(potential_matrix(rho, spec, u.M), tau, a)
        diff = float(np.max(np.abs(nxt - b)))
        b = nxt
        if diff <= tol:
            break
    else:
        if not diff <= KICK_FALLBACK_TOL * scale:
            raise StepUnstable("kick fixed point did not converge", {'tau': tau, 'residual': diff, 'scale': scale})
        log.debug(f"kick stalled at residual {diff:.3e} (scale {scale:.3e})")
    return FourierState(b)


def strang_step(u: FourierState, dt: float, spec: KernelSpec) -> FourierState:
    """Half kick, drift, half kick"""
    if dt == 0:
        return u
    return _kick(_drift(_kick(u, 0.5 * dt, spec), dt), 0.5 * dt, spec)


def lie_step(u: FourierState, dt: float, spec: KernelSpec) -> FourierState:
    """Drift then kick; first order"""
    if dt == 0:
        return u
    return _kick(_drift(u, dt), dt, spec)


def _inverse_lie_step(u: FourierState, dt: float, spec: KernelSpec) -> FourierState:
    return _drift(_kick(u, -dt, spec), -dt)


def step(u: FourierState, dt: float, spec: KernelSpec, scheme: Scheme = Scheme.STRANG) -> FourierState:
    return strang_step(u, dt, spec) if scheme is Scheme.STRANG else lie_step(u, dt, spec)


def time_reversal_check(u: FourierState, dt: float, n_steps: int, spec: KernelSpec,
                        scheme: Scheme = Scheme.STRANG) -> float:
    """max |u_k| error after n forward steps followed by their exact inverses"""
    v = u
    for _ in range(n_steps):
        v = step(v, dt, spec, scheme)
    for _ in range(n_steps):
        v = strang_step(v, -dt, spec) if scheme is Scheme.STRANG else _inverse_lie_step(v, dt, spec)
    return float(np.max(np.abs(v.amplitudes - u.amplitudes)))


# ---------------------------------------------------------------------------
# Trajectories


@dataclass
class TrajectoryReport:
    times: List[float] = field(default_factory=list)
    L2: List[float] = field(default_factory=list)
    H: List[float] = field(default_factory=list)
    D_stat: List[float] = field(default_factory=list)
    norm_s: List[float] = field(default_factory=list)
    exit_flag: bool = False
    exit_time: Optional[float] = None
    threshold: float = 0.0

    @property
    def L2_drift(self) -> List[float]:
        return [abs(v - self.L2[0]) for v in self.L2]

    @property
    def H_drift(self) -> List[float]:
        return [abs(v - self.H[0]) for v in self.H]

    @property
    def max_growth(self) -> float:
        """max_t N_s(u(t)) / N_s(u(0)); 1 for zero data"""
        if not self.norm_s or self.norm_s[0] == 0:
            return 1.0
        return max(self.norm_s) / self.norm_s[0]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'n_observations': len(self.times),
            'max_L2_drift': max(self.L2_drift, default=0.0),
            'max_H_drift': max(self.H_drift, default=0.0),
            'max_D_stat': max(self.D_stat, default=0.0),
            'max_growth': self.max_growth,
            'exit_flag': self.exit_flag,
            'exit_time': self.exit_time,
            'threshold': self.threshold,
        }


def bootstrap_statistic(u: FourierState, actions0: np.ndarray, weights: np.ndarray) -> float:
    """D(t) = sum_j e^{s f(<j>)} | |u_j(t)|^2 - |u_j(0)|^2 |^{1/2}"""
    return float(np.sum(weights * np.sqrt(np.abs(u.actions - actions0))))


def evolve(u0: FourierState, cfg: SimConfig, spec: KernelSpec, p: NormParams, f: WeightFunction) -> TrajectoryReport:
    """Integrates to T_end, observing every observer_stride steps and at the final step"""
    u = u0.pad_to(cfg.M_sim) if u0.M != cfg.M_sim else u0
    weights = weight_vector(cfg.M_sim, p.s, f)
    actions0 = u.actions
    norm0 = weighted_norm(u, p, f)
    report = TrajectoryReport(threshold=norm0 ** 1.5)
    n_steps = cfg.n_steps

    def observe(n: int, state: FourierState) -> None:
        if not np.all(np.isfinite(state.amplitudes)):
            raise StepUnstable(f"non-finite amplitudes at step {n}", {'step': n, 'time': n * cfg.dt})
        t = n * cfg.dt
        D = bootstrap_statistic(state, actions0, weights)
        report.times.append(t)
        report.L2.append(float(np.sum(state.actions)))
        report.H.append(truncated_energy(state, spec))
        report.D_stat.append(D)
        report.norm_s.append(weighted_norm(state, p, f))
        if not report.exit_flag and D > report.threshold:
            report.exit_flag = True
            report.exit_time = t

    observe(0, u)
    for n in range(1, n_steps + 1):
        u = step(u, cfg.dt, spec, cfg.scheme)
        if n % cfg.observer_stride == 0 or n == n_steps:
            observe(n, u)
    log.debug(f"evolved {n_steps} steps, exit={report.exit_flag}, growth={report.max_growth:.6f}")
    return report


def trajectory_frame(report: TrajectoryReport) -> pd.DataFrame:
    return pd.DataFrame({'time': report.times, 'L2': report.L2, 'H': report.H,
                         'D_stat': report.D_stat, 'norm_s': report.norm_s})


def write_trajectory(report: TrajectoryReport, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    trajectory_frame(report).to_csv(path, index=False, float_format="%.17g")


def energy_drift_order(u0: FourierState, cfg: SimConfig, spec: KernelSpec, p: NormParams,
                       f: WeightFunction) -> float:
    """log2 of max|H - H(0)| at dt over the same at dt/2"""
    coarse = evolve(u0, cfg, spec, p, f)
    fine_cfg = SimConfig(cfg.M_sim, cfg.dt / 2.0, cfg.T_end, cfg.scheme, cfg.observer_stride * 2)
    fine = evolve(u0, fine_cfg, spec, p, f)
    return math.log2(max(coarse.H_drift) / max(fine.H_drift))


def plane_wave(M: int, k: int, amplitude: complex) -> FourierState:
    return FourierState.from_modes(M, {k: amplitude})


# ---------------------------------------------------------------------------
# Stability experiment


@dataclass(frozen=True)
class EnsembleSpec:
    n_members: int                      # initial states drawn from the ball
    r: float                            # ball radius
    seed: int = 0                       # RNG seed of the ensemble


@dataclass
class GroupSummary:
    n: int = 0
    exits: int = 0
    exit_times: List[float] = field(default_factory=list)
    max_growth: List[float] = field(default_factory=list)
    doubling_violations: int = 0

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out['max_growth_max'] = max(self.max_growth, default=None)
        return out


@dataclass
class StabilitySummary:
    r: float
    gamma_gate: float
    gated: GroupSummary
    ungated: GroupSummary
    p_value: Optional[float]
    margins: List[float]
    banner: str = HORIZON_BANNER

    def to_dict(self) -> Dict[str, Any]:
        return {'r': self.r, 'gamma_gate': self.gamma_gate, 'gated': self.gated.to_dict(),
                'ungated': self.ungated.to_dict(), 'p_value': self.p_value, 'margins': self.margins,
                'banner': self.banner}

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as fh:
            json.dump(self.to_dict(), fh, indent=2)


def run_stability_experiment(ensemble: EnsembleSpec, cfg: SimConfig, spec: KernelSpec, p: NormParams,
                             f: WeightFunction, nr: NonResonanceParams,
                             workers: Optional[int] = None) -> StabilitySummary:
    """
    Splits ball samples by the sign of the margin at 3 gamma on the simulation cutoff M_sim
    (nr supplies gamma and d only), evolves every member
    and compares the max-growth distributions with a one-sided Mann-Whitney test.
    """
    rng = np.random.default_rng(ensemble.seed)
    amplitudes = sample_ball_amplitudes(cfg.M_sim, p.s, f, ensemble.r, ensemble.n_members, rng)
    states = [FourierState(a) for a in amplitudes]
    gate = NonResonanceParams(3.0 * nr.gamma, cfg.M_sim, nr.d)
    margins = [nonresonance_margin(spec, u, gate, p, f) for u in states]

    def run(u: FourierState) -> TrajectoryReport:
        return evolve(u, cfg, spec, p, f)

    with ThreadPoolExecutor(max_workers=workers or THREADS) as pool:
        reports = list(pool.map(run, states))

    gated, ungated = GroupSummary(), GroupSummary()
    for margin, report in zip(margins, reports):
        group = gated if margin > 0 else ungated
        group.n += 1
        group.max_growth.append(report.max_growth)
        if report.exit_flag:
            group.exits += 1
            group.exit_times.append(report.exit_time)
        if report.max_growth > 2.0:
            group.doubling_violations += 1

    p_value = None
    if gated.max_growth and ungated.max_growth:
        p_value = float(stats.mannwhitneyu(gated.max_growth, ungated.max_growth, alternative='less').pvalue)
    log.info(f"stability experiment r={ensemble.r}: gated {gated.n} ({gated.exits} exits), "
             f"ungated {ungated.n} ({ungated.exits} exits), p={p_value}")
    if gated.doubling_violations:
        log.warning(f"{gated.doubling_violations} gated members exceeded twice their initial norm")
    return StabilitySummary(ensemble.r, gate.gamma, gated, ungated, p_value, [float(m) for m in margins])


# ---------------------------------------------------------------------------
# Action drift in normal-form coordinates


@dataclass
class ActionDriftReport:
    raw: float
    normalized: float

    @property
    def ratio(self) -> float:
        return self.normalized / self.raw if self.raw > 0 else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {'raw': self.raw, 'normalized': self.normalized, 'ratio': self.ratio}


def normal_form_action_drift(states: Sequence[FourierState], nf) -> ActionDriftReport:
    """max over time and modes of the action drift, raw and after the normal-form transform"""
    if not states:
        return ActionDriftReport(0.0, 0.0)
    raw0 = states[0].actions
    norm0 = nf.normalized_actions(states[0])
    raw, normalized = 0.0, 0.0
    for u in states[1:]:
        raw = max(raw, float(np.max(np.abs(u.actions - raw0))))
        actions = nf.normalized_actions(u)
        normalized = max(normalized, float(np.max(np.abs(actions - norm0))))
    return ActionDriftReport(raw, normalized)


def sample_trajectory(u0: FourierState, cfg: SimConfig, spec: KernelSpec) -> List[FourierState]:
    """States at every observer_stride steps"""
    u = u0.pad_to(cfg.M_sim) if u0.M != cfg.M_sim else u0
    out = [u]
    for n in range(1, cfg.n_steps + 1):
        u = step(u, cfg.dt, spec, cfg.scheme)
        if n % cfg.observer_stride == 0:
            out.append(u)
    return out
