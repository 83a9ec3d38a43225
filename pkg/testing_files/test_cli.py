"""
End-to-end runs of the command line on small configurations
"""

import json

import pandas as pd
import pytest

from nekhoroshev_lab.cli import main

KERNEL = {"kind": "power", "parameter": 1}
WEIGHT = {"kind": "gevrey", "parameter": 0.5}


def write_config(tmp_path, name, **blocks):
    payload = {"schema_version": 1, "seed": 7, "output_dir": str(tmp_path / "out"), **blocks}
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return path


def test_validate(tmp_path):
    path = write_config(tmp_path, "ok.json", kernel=KERNEL, weight=WEIGHT)
    assert main(["validate", "--config", str(path)]) == 0


def test_invalid_kernel_kind(tmp_path, capsys):
    path = write_config(tmp_path, "bad.json", kernel={"kind": "gaussian", "parameter": 1})
    assert main(["validate", "--config", str(path)]) == 2
    assert "ConfigError" in capsys.readouterr().err


def test_missing_block(tmp_path):
    path = write_config(tmp_path, "empty.json", kernel=KERNEL)
    assert main(["timeplan", "--config", str(path)]) == 2


def test_normalize_is_reproducible(tmp_path):
    blocks = dict(kernel=KERNEL, weight=WEIGHT, norm={"s": 2.0, "s0": 1.0, "r": 0.01}, modes={"M": 2},
                  degree={"d": 3})
    path = write_config(tmp_path, "nf.json", **blocks)
    first, second = tmp_path / "first", tmp_path / "second"
    assert main(["normalize", "--config", str(path), "--output-dir", str(first)]) == 0
    assert main(["normalize", "--config", str(path), "--output-dir", str(second)]) == 0

    out = first / "normalize"
    for name in ("H.poly", "Z.poly", "R.poly", "resonant_steps.json", "resonant_steps.csv",
                 "residual_report.json", "run.log"):
        assert (out / name).exists()
    report = json.loads((out / "residual_report.json").read_text())
    assert report['H0_Z_bracket_sup'] <= 1e-12
    assert report['quartic_gap'] <= 1e-12
    assert (out / "Z.poly").read_bytes() == (second / "normalize" / "Z.poly").read_bytes()


def test_timeplan(tmp_path):
    regime = {"regime": "ultra_power", "iota": 0.5, "a": 0.1, "weight_parameter": 3.0, "kernel_parameter": 1.0,
              "d_grid": [10, 30, 100]}
    path = write_config(tmp_path, "tp.json", regime=regime)
    assert main(["timeplan", "--config", str(path)]) == 0
    frame = pd.read_csv(tmp_path / "out" / "timeplan" / "regime_sweep.csv")
    assert list(frame['d']) == [10, 30, 100]
    assert 'ratio' in frame.columns
    payload = json.loads((tmp_path / "out" / "timeplan" / "asymptotics.json").read_text())
    assert payload['limit'] == pytest.approx(2.0 ** -1.5)
    assert payload['warnings']


def test_measure(tmp_path):
    path = write_config(tmp_path, "measure.json", kernel={"kind": "exp", "parameter": 1.0}, weight=WEIGHT,
                        norm={"s": 1.0, "r": 0.1}, modes={"M": 2}, degree={"d": 2},
                        gamma={"gamma": 0.001, "sweep": [0.0001, 0.01, 0.1]},
                        sampling={"n_samples": 200})
    assert main(["measure", "--config", str(path)]) == 0
    frame = pd.read_csv(tmp_path / "out" / "measure" / "gamma_sweep.csv")
    assert list(frame['gamma']) == sorted(frame['gamma'])
    assert frame['fraction'].is_monotonic_increasing
    assert (tmp_path / "out" / "measure" / "fraction.json").exists()


def test_simulate_zero_data(tmp_path):
    path = write_config(tmp_path, "sim.json", kernel=KERNEL, weight=WEIGHT, norm={"s": 1.0, "s0": 0.5, "r": 0.1},
                        simulation={"M_sim": 4, "dt": 0.01, "T_end": 0.1, "initial": "zero"})
    assert main(["simulate", "--config", str(path), "--seed", "3"]) == 0
    frame = pd.read_csv(tmp_path / "out" / "simulate" / "trajectory.csv")
    assert (frame['D_stat'] == 0.0).all()
    assert (frame['L2'] == 0.0).all()
    summary = json.loads((tmp_path / "out" / "simulate" / "summary.json").read_text())
    assert summary['seed'] == 3
    assert summary['n_steps'] == 10


def test_timeplan_decreasing_grid_is_a_domain_error(tmp_path, capsys):
    regime = {"regime": "ultra_power", "iota": 0.5, "a": 0.1, "weight_parameter": 3.0, "kernel_parameter": 1.0,
              "d_grid": [100, 30]}
    path = write_config(tmp_path, "tp_bad.json", regime=regime)
    assert main(["timeplan", "--config", str(path)]) == 3
    assert "DomainError" in capsys.readouterr().err
