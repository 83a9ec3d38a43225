"""
Resonant Normal Form - Normal-Form Laboratory
Homological splitting by the energy indicator, Lie transforms and the certified step ledger
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import sympy

from .config import LEDGER
from .errors import PreconditionError, ScaleError, SmallnessViolated
from .lattice import FourierState, NormParams, WeightFunction, energy
from .logging_setup import get_logger
from .poly import (PolyHamiltonian, certified_norm, flow, poisson_bracket, poisson_bracket_split,
                   sampled_norm, to_exact)

log = get_logger("resonant_nf")


def _inverse_factorial(n: int, exact: bool):
    return sympy.Rational(1, math.factorial(n)) if exact else 1.0 / math.factorial(n)


def homological_split(P: PolyHamiltonian) -> Tuple[PolyHamiltonian, PolyHamiltonian]:
    """
    S = sum over non-resonant J of P_J / (i E(J)) u_J and dZ = resonant part of P,
    so that {S, H0} + P_nonres = 0.
    """
    S, dZ = {}, {}
    for J, c in P.items():
        E = energy(J)
        if E == 0:
            dZ[J] = c
        else:
            S[J] = c / (to_exact(sympy.I * E) if P.exact else 1j * E)
    return PolyHamiltonian._trusted(S, P.exact), PolyHamiltonian._trusted(dZ, P.exact)


def ad_series(S: PolyHamiltonian, X: PolyHamiltonian, degree_cut: int,
              shift: int = 0) -> Tuple[PolyHamiltonian, PolyHamiltonian]:
    """
    sum_{l>=1} ad_S^l X / (l+shift)!, ad_S X = {S, X}, split at degree_cut.
    Only the within-cutoff part is bracketed again; overflow is collected once.
    """
    exact = S.exact and X.exact
    low_total = PolyHamiltonian.zero(exact)
    high_total = PolyHamiltonian.zero(exact)
    current, l = X, 0
    while current and S:
        l += 1
        low, high = poisson_bracket_split(S, current, degree_cut)
        weight = _inverse_factorial(l + shift, exact)
        low_total = low_total + low * weight
        high_total = high_total + high * weight
        current = low
    return low_total, high_total


def lie_transform(H: PolyHamiltonian, S: PolyHamiltonian,
                  degree_cut: int) -> Tuple[PolyHamiltonian, PolyHamiltonian]:
    """H o phi_S^{-1} = sum_n ad_S^n H / n!, split into (degree <= degree_cut, remainder)"""
    if H and H.degree_range[1] > degree_cut:
        raise PreconditionError("degree cutoff below the degree of H",
                                {'degree_cut': degree_cut, 'degree': H.degree_range[1]})
    if S and S.degree_range[0] < 3:
        raise PreconditionError("generator must have degree >= 3 for the series to terminate",
                                {'min_degree': S.degree_range[0]})
    low, high = ad_series(S, H, degree_cut)
    return H + low, high


@dataclass
class StepRecord:
    """Certified ledger of one normalization step"""
    step: int
    radius: float
    n_generator: int
    n_resonant: int
    n_next: int
    n_remainder: int
    norm_generator: float
    norm_perturbation: float
    bound_perturbation: float
    norm_normal_form: float
    bound_normal_form: float
    max_coefficient: float
    sampled_perturbation: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def step_radius(r: float, d: int, k: int) -> float:
    """r_k = r - (k-1) r / (2d-2)"""
    return r - (k - 1) * r / (2 * d - 2)


def perturbation_bound(C_K: float, r: float, d: int, k: int) -> float:
    """C_K C1^k r^{2k} d^{3k-3}"""
    return C_K * LEDGER.C1 ** k * r ** (2 * k) * float(d) ** (3 * k - 3)


def normal_form_bound(C_K: float, r: float) -> float:
    return 2.0 * C_K * LEDGER.C1 * r * r


def remainder_bound(C_K: float, r: float, d: int) -> float:
    """6 C_K^d C1^{2d} r^{2d-2} d^{7d+1}, assembled in log space"""
    log_value = (math.log(6.0) + d * math.log(C_K) + 2 * d * math.log(LEDGER.C1)
                 + (2 * d - 2) * math.log(r) + (7 * d + 1) * math.log(d))
    return math.exp(min(log_value, 700.0))


@dataclass
class NormalFormResult:
    """H o Phi^{-1} = H0 + Z + R with Phi = phi_{d-1} o ... o phi_1, phi_k the time-1 flow of S_k"""
    H0: PolyHamiltonian
    Z: PolyHamiltonian
    R: PolyHamiltonian
    generators: List[PolyHamiltonian]
    steps: List[StepRecord]
    d: int
    degree_cut: int
    P: PolyHamiltonian = field(default_factory=PolyHamiltonian.zero)

    def hamiltonian(self) -> PolyHamiltonian:
        return self.H0 + self.Z + self.P + self.R

    def transform(self, u: FourierState) -> FourierState:
        """Normal-form coordinates v = Phi(u)"""
        for S in self.generators:
            u = flow(S, u, 1.0)
        return u

    def inverse_transform(self, v: FourierState) -> FourierState:
        for S in reversed(self.generators):
            v = flow(S, v, -1.0)
        return v

    def normalized_actions(self, u: FourierState) -> np.ndarray:
        return self.transform(u).actions

    def step_frame(self) -> pd.DataFrame:
        return pd.DataFrame([s.to_dict() for s in self.steps])

    def write_step_log(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            json.dump([s.to_dict() for s in self.steps], f, indent=2)

    def write_step_table(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        self.step_frame().to_csv(path, index=False)

    def summary(self) -> Dict[str, Any]:
        return {
            'd': self.d,
            'degree_cut': self.degree_cut,
            'terms_Z': len(self.Z),
            'terms_R': len(self.R),
            'generators': [len(S) for S in self.generators],
            'steps': [s.to_dict() for s in self.steps],
        }


def smallness_gate(C_K: float, r: float, d: int) -> float:
    """3 C_K r^2 d^3, must stay below 1"""
    return 3.0 * C_K * r * r * d ** 3


def resonant_normalize(H: PolyHamiltonian, d: int, p: NormParams, f: WeightFunction, C_K: float = 1.0,
                       rng: Optional[np.random.Generator] = None, check_bounds: bool = True) -> NormalFormResult:
    """
    Steps k = 1..d-1 at degree cutoff 2d: S_k solves {H0,S_k} + P_k = dZ_k, then
    P_{k+1} collects ad_{S_k}^{l>=2} H0 / l!, ad_{S_k}^{l>=1} Z_k / l! and ad_{S_k}^{l>=1} P_k / l!.
    Terms above the cutoff go to R.
    """
    if d < 2:
        raise PreconditionError("resonant normal form needs d >= 2", {'d': d})
    if p.s <= p.s0:
        raise ScaleError("normal form needs s > s0", {'s': p.s, 's0': p.s0})
    gate = smallness_gate(C_K, p.r, d)
    if check_bounds and gate >= 1.0:
        raise SmallnessViolated(f"smallness gate 3 C_K r^2 d^3 = {gate:.3e} is not below 1", step=0,
                                details={'gate': gate, 'r': p.r, 'd': d})
    cut = 2 * d
    exact = H.exact
    H0 = H.layer(2)
    P = H.filter(lambda J, c: 2 < len(J) <= cut)
    R = H.filter(lambda J, c: len(J) > cut)
    Z = PolyHamiltonian.zero(exact)
    generators: List[PolyHamiltonian] = []
    steps: List[StepRecord] = []
    log.info(f"resonant normal form: d={d}, cutoff={cut}, r={p.r}, {len(P)} perturbation terms")

    for k in range(1, d):
        r_k = step_radius(p.r, d, k)
        norm_P = certified_norm(P, r_k)
        bound_P = perturbation_bound(C_K, p.r, d, k)
        S, dZ = homological_split(P)
        P_nonres = P - dZ
        # ad_S^l H0 = ad_S^{l-1} {S,H0} = -ad_S^{l-1} P_nonres
        from_h0, over_h0 = ad_series(S, -P_nonres, cut, shift=1)
        from_z, over_z = ad_series(S, Z, cut)
        from_p, over_p = ad_series(S, P, cut)
        Z = Z + dZ
        P = from_h0 + from_z + from_p
        R = R + over_h0 + over_z + over_p
        generators.append(S)

        norm_Z = certified_norm(Z, r_k)
        bound_Z = normal_form_bound(C_K, p.r)
        sampled = None
        if rng is not None and P:
            sampled = sampled_norm(P, r_k, p.s, f, rng)
        record = StepRecord(
            step=k, radius=r_k, n_generator=len(S), n_resonant=len(dZ), n_next=len(P), n_remainder=len(R),
            norm_generator=certified_norm(S, r_k), norm_perturbation=norm_P, bound_perturbation=bound_P,
            norm_normal_form=norm_Z, bound_normal_form=bound_Z,
            max_coefficient=max(S.coefficient_sup(), Z.coefficient_sup(), P.coefficient_sup()),
            sampled_perturbation=sampled)
        steps.append(record)
        log.info(f"step {k}: |S|={len(S)} |dZ|={len(dZ)} |P|={len(P)} |R|={len(R)} "
                 f"norm_P={norm_P:.3e} (bound {bound_P:.3e})")
        if check_bounds:
            if norm_P > bound_P * (1 + 1e-12):
                raise SmallnessViolated(f"perturbation bound failed at step {k}", step=k,
                                        details={'norm': norm_P, 'bound': bound_P})
            if norm_Z > bound_Z * (1 + 1e-12):
                raise SmallnessViolated(f"normal-form bound failed at step {k}", step=k,
                                        details={'norm': norm_Z, 'bound': bound_Z})

    r_final = step_radius(p.r, d, d)
    norm_R = certified_norm(R, r_final)
    bound_R = remainder_bound(C_K, p.r, d)
    log.info(f"remainder: {len(R)} terms, certified {norm_R:.3e} (bound {bound_R:.3e})")
    if check_bounds and norm_R > bound_R:
        raise SmallnessViolated("remainder bound failed", step=d, details={'norm': norm_R, 'bound': bound_R})
    return NormalFormResult(H0=H0, Z=Z, R=R, generators=generators, steps=steps, d=d, degree_cut=cut,
                            P=P if P else PolyHamiltonian.zero(exact))
