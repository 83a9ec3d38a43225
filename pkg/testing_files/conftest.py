"""
Shared fixtures for the laboratory test suite
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from nekhoroshev_lab.kernel import KernelSpec  # noqa: E402
from nekhoroshev_lab.lattice import FourierState, NormParams, WeightFunction  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(20240101)


@pytest.fixture
def power_kernel():
    return KernelSpec.power(1)


@pytest.fixture
def exp_kernel():
    return KernelSpec.exponential(1.0)


@pytest.fixture
def gevrey_weight():
    return WeightFunction.gevrey(0.5)


@pytest.fixture
def norm_params():
    return NormParams(s=2.0, s0=1.0, r=0.01)


def random_state(rng: np.random.Generator, M: int, scale: float = 1.0) -> FourierState:
    """Complex Gaussian amplitudes on modes -M..M"""
    n = 2 * M + 1
    return FourierState(scale * (rng.normal(size=n) + 1j * rng.normal(size=n)))
