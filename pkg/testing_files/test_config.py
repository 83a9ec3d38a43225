"""
Run configuration parsing and validation
"""

import json

import pytest

from nekhoroshev_lab.config import LEDGER, RunConfig, load_run_config, parse_run_config
from nekhoroshev_lab.errors import (BranchDomainError, ConfigError, DomainError, EnumerationOverflow, LabError,
                                    ModeOutOfRange, NoConvergence, PreconditionError, SmallnessViolated,
                                    StepUnstable)

BASE = {
    "schema_version": 1,
    "seed": 7,
    "kernel": {"kind": "power", "parameter": 1},
    "weight": {"kind": "gevrey", "parameter": 0.5},
    "norm": {"s": 2.0, "s0": 1.0, "r": 0.01},
    "modes": {"M": 2},
    "degree": {"d": 3},
}


def test_parses_blocks():
    cfg = parse_run_config(BASE)
    assert cfg.seed == 7
    assert cfg.kernel.to_spec().kind.value == "power"
    assert cfg.degree.convention == "hamiltonian"
    assert cfg.gamma is None


def test_unknown_key_rejected():
    with pytest.raises(ConfigError) as info:
        parse_run_config({**BASE, "kernel": {"kind": "power", "parameter": 1, "extra": 3}})
    assert info.value.exit_code == 2
    assert "kernel" in info.value.details['blocks']


def test_bad_kernel_kind():
    with pytest.raises(ConfigError):
        parse_run_config({**BASE, "kernel": {"kind": "gaussian", "parameter": 1}})


def test_schema_version_pinned():
    with pytest.raises(ConfigError):
        parse_run_config({**BASE, "schema_version": 2})


@pytest.mark.parametrize("weight", [{"kind": "gevrey", "parameter": 1.5}, {"kind": "logultra", "parameter": 0.5}])
def test_weight_parameter_range(weight):
    with pytest.raises(ConfigError):
        parse_run_config({**BASE, "weight": weight})


def test_require_names_missing_blocks():
    cfg = parse_run_config(BASE)
    cfg.require('kernel', 'modes')
    with pytest.raises(ConfigError) as info:
        cfg.require('kernel', 'gamma', 'sampling')
    assert info.value.details['missing'] == ['gamma', 'sampling']


def test_with_seed():
    cfg = parse_run_config(BASE)
    assert cfg.with_seed(None) is cfg
    assert cfg.with_seed(99).seed == 99
    assert cfg.seed == 7


def test_load_from_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(BASE))
    assert isinstance(load_run_config(path), RunConfig)


def test_unreadable_file(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_run_config(path)
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "missing.json")


def test_ledger_is_frozen():
    with pytest.raises(Exception):
        LEDGER.C1 = 1.0


@pytest.mark.parametrize("error, code", [
    (ConfigError, 2),
    (DomainError, 3),
    (BranchDomainError, 3),
    (ModeOutOfRange, 3),
    (EnumerationOverflow, 3),
    (PreconditionError, 3),
    (SmallnessViolated, 3),
    (NoConvergence, 4),
    (StepUnstable, 4),
    (LabError, 1),
])
def test_exit_codes(error, code):
    assert error("boom").exit_code == code
    assert error("boom").to_dict()['exit_code'] == code
