"""
Configuration - Normal-Form Laboratory
Ledger constants, environment knobs and the validated run configuration
"""

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

# Load environment variables
load_dotenv()

LOG_LEVEL = os.getenv("NEKHOROSHEV_LOG_LEVEL", "INFO")
THREADS = int(os.getenv("NEKHOROSHEV_THREADS", "1"))
OUTPUT_DIR = os.getenv("NEKHOROSHEV_OUTPUT_DIR", "outputs")

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class LedgerConstants:
    """Constants that gate certified bounds and statistical checks, never the algebra"""
    C1: float = 10.0                    # absolute constant of the resonant iteration
    C2: float = 10.0                    # absolute constant of the rational iteration
    enumeration_budget: int = 2_000_000  # max reduced charge vectors before EnumerationOverflow
    flow_rtol: float = 1e-11            # solve_ivp relative tolerance for generator flows
    flow_atol: float = 1e-13            # solve_ivp absolute tolerance
    flow_tolerance: float = 1e-8        # acceptance for flow oracles and round trips
    residual_tolerance: float = 1e-8    # acceptance for homological residuals
    cauchy_slack: float = 2.0           # slack factor on sampled-sup Cauchy checks
    lie_slack: float = 2.0              # slack factor on sampled-sup Lie-bracket checks
    sup_samples: int = 200              # states used for a sampled sup over a ball
    fd_step: float = 1e-6               # relative step for finite-difference Jacobians
    lipschitz_pairs: int = 10_000       # random pairs for the frequency Lipschitz check


LEDGER = LedgerConstants()


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class KernelBlock(_Block):
    kind: Literal["power", "exp"]
    parameter: float = Field(gt=0)

    def to_spec(self):
        from .kernel import KernelSpec
        return KernelSpec.from_config(self.model_dump())


class WeightBlock(_Block):
    kind: Literal["gevrey", "logultra"]
    parameter: float = Field(gt=0)
    c: float = Field(default=1.0, ge=1.0)
    C_f: float = Field(default=0.9, ge=0.0, lt=1.0)

    def to_weight(self):
        from .lattice import weight_from_config
        return weight_from_config(self.model_dump())


class NormBlock(_Block):
    s: float = Field(gt=0)
    s0: Optional[float] = Field(default=None, gt=0)   # computed from the weight when omitted
    r: float = Field(gt=0)


class ModesBlock(_Block):
    M: int = Field(ge=1)


class DegreeBlock(_Block):
    d: int = Field(ge=2)
    h_budget: Optional[int] = Field(default=None, ge=2)
    convention: Literal["hamiltonian", "printed"] = "hamiltonian"


class GammaBlock(_Block):
    gamma: float = Field(ge=0)
    sweep: List[float] = Field(default_factory=list)


class SimulationBlock(_Block):
    M_sim: int = Field(ge=1)
    dt: float = Field(gt=0)
    T_end: float = Field(gt=0)
    scheme: Literal["strang", "lie"] = "strang"
    observer_stride: int = Field(default=10, ge=1)
    ensemble_size: int = Field(default=8, ge=1)
    initial: Literal["ball", "zero", "plane_wave"] = "ball"


class SamplingBlock(_Block):
    n_samples: int = Field(ge=100)
    threshold: Literal["omega_3gamma", "gamma_norm2"] = "omega_3gamma"
    radius_normalization: Literal["unit_ball", "radius"] = "unit_ball"


class RegimeBlock(_Block):
    regime: Literal["gevrey_power", "gevrey_exp", "ultra_power", "ultra_exp"]
    iota: float = Field(gt=0)
    a: float
    s: float = Field(default=1.0, gt=0)
    weight_parameter: float = Field(gt=0)
    kernel_parameter: float = Field(gt=0)
    d_grid: List[int] = Field(default_factory=lambda: [4, 8, 16, 32, 64])


class RunConfig(_Block):
    schema_version: Literal[1] = SCHEMA_VERSION
    seed: int = 0
    output_dir: str = OUTPUT_DIR
    kernel: Optional[KernelBlock] = None
    weight: Optional[WeightBlock] = None
    norm: Optional[NormBlock] = None
    modes: Optional[ModesBlock] = None
    degree: Optional[DegreeBlock] = None
    gamma: Optional[GammaBlock] = None
    simulation: Optional[SimulationBlock] = None
    sampling: Optional[SamplingBlock] = None
    regime: Optional[RegimeBlock] = None

    @model_validator(mode="after")
    def _weight_matches_kind(self):
        w = self.weight
        if w is not None:
            if w.kind == "gevrey" and not w.parameter < 1.0:
                raise ValueError("gevrey weight parameter must lie in (0,1)")
            if w.kind == "logultra" and not w.parameter > 1.0:
                raise ValueError("logultra weight parameter must exceed 1")
        return self

    def require(self, *blocks: str) -> None:
        missing = [name for name in blocks if getattr(self, name) is None]
        if missing:
            raise ConfigError(f"missing required block(s): {', '.join(missing)}", {'missing': missing})

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        return self if seed is None else self.model_copy(update={'seed': seed})


def parse_run_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        blocks = sorted({str(err['loc'][0]) for err in e.errors() if err['loc']})
        raise ConfigError(f"invalid configuration in block(s): {', '.join(blocks) or 'root'}",
                          {'blocks': blocks, 'errors': [err['msg'] for err in e.errors()]}) from e


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"could not read config file {path}: {e}", {'path': str(path)}) from e
    return parse_run_config(data)
