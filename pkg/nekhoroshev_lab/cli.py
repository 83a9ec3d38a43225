"""
Command Line - Normal-Form Laboratory
Config-driven batch runs of the four engines with reproducible CSV/JSON outputs
"""

import argparse
import json
import sys
import warnings
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from .config import RunConfig, load_run_config, parse_run_config
from .errors import LabError
from .kernel import NonResonanceParams
from .lattice import FourierState, NormParams, WeightFunction, compute_s0, weight_vector
from .logging_setup import configure_logging, get_logger
from .measure import BallSampler, RadiusNormalization, Threshold, gamma_sweep, resonant_fraction
from .poly import action_quartic, build_hamiltonian, dump_poly, poisson_bracket
from .rational_nf import integrable_normalize
from .resonant_nf import resonant_normalize
from .simulator import (EnsembleSpec, Scheme, SimConfig, evolve, plane_wave, run_stability_experiment,
                        write_trajectory)
from .timeplan import Regime, RegimeParams, asymptotic_constant, regime_sweep

log = get_logger("cli")


def _write_json(path: Path, payload: Dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=str)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _norm_params(cfg: RunConfig, f: WeightFunction) -> NormParams:
    s0 = cfg.norm.s0 if cfg.norm.s0 is not None else compute_s0(f)
    return NormParams(cfg.norm.s, s0, cfg.norm.r)


# ---------------------------------------------------------------------------
# Commands


def cmd_normalize(cfg: RunConfig, out: Path) -> List[Path]:
    """Resonant normal form, then the integrable one when a gamma block is given"""
    cfg.require('kernel', 'weight', 'norm', 'modes', 'degree')
    spec, f = cfg.kernel.to_spec(), cfg.weight.to_weight()
    p = _norm_params(cfg, f)
    M, d = cfg.modes.M, cfg.degree.d
    rng = np.random.default_rng(cfg.seed)
    H = build_hamiltonian(spec, M)
    nf = resonant_normalize(H, d, p, f, spec.C_K, rng=rng)

    written = []
    for name, poly in (('H.poly', H), ('Z.poly', nf.Z), ('R.poly', nf.R)):
        _write_text(out / name, dump_poly(poly))
        written.append(out / name)
    nf.write_step_log(out / 'resonant_steps.json')
    nf.write_step_table(out / 'resonant_steps.csv')
    written += [out / 'resonant_steps.json', out / 'resonant_steps.csv']

    commutator = poisson_bracket(nf.H0, nf.Z)
    quartic_gap = (nf.Z.layer(4) - action_quartic(spec, M)).coefficient_sup()
    report: Dict[str, Any] = {
        'resonant': nf.summary(),
        'H0_Z_bracket_terms': len(commutator),
        'H0_Z_bracket_sup': commutator.coefficient_sup(),
        'quartic_gap': quartic_gap,
    }

    if cfg.gamma is not None and d >= 3:
        nr = NonResonanceParams(cfg.gamma.gamma, M, d)
        rnf = integrable_normalize(nf.H0 + nf.Z, d, p, nr, f, spec, cfg.degree.h_budget, rng=rng)
        _write_text(out / 'K.rational', rnf.K.dump())
        rnf.write_step_log(out / 'rational_steps.json')
        written += [out / 'K.rational', out / 'rational_steps.json']
        report['rational'] = rnf.summary()
    _write_json(out / 'residual_report.json', report)
    written.append(out / 'residual_report.json')
    log.info(f"normalize: {{H0,Z}} has {len(commutator)} terms, quartic gap {quartic_gap:.3e}")
    return written


def _initial_state(cfg: RunConfig, M: int, s: float, f: WeightFunction) -> FourierState:
    kind, r = cfg.simulation.initial, cfg.norm.r
    if kind == 'zero':
        return FourierState.zeros(M)
    if kind == 'plane_wave':
        return plane_wave(M, 1, r / weight_vector(M, s, f)[M + 1])
    return FourierState(BallSampler(M, s, f, r, cfg.seed).batch(1)[0])


def cmd_simulate(cfg: RunConfig, out: Path) -> List[Path]:
    """One trajectory CSV and a summary JSON; ball ensembles add the gated/ungated experiment"""
    cfg.require('kernel', 'weight', 'norm', 'simulation')
    spec, f = cfg.kernel.to_spec(), cfg.weight.to_weight()
    p = _norm_params(cfg, f)
    sim = cfg.simulation
    sc = SimConfig(sim.M_sim, sim.dt, sim.T_end, Scheme(sim.scheme), sim.observer_stride)
    report = evolve(_initial_state(cfg, sim.M_sim, p.s, f), sc, spec, p, f)
    write_trajectory(report, out / 'trajectory.csv')
    summary: Dict[str, Any] = {'seed': cfg.seed, 'n_steps': sc.n_steps, 'trajectory': report.to_dict()}
    if sim.initial == 'ball' and cfg.gamma is not None:
        cfg.require('degree')
        nr = NonResonanceParams(cfg.gamma.gamma, sim.M_sim, cfg.degree.d)
        experiment = run_stability_experiment(EnsembleSpec(sim.ensemble_size, p.r, cfg.seed), sc, spec, p, f, nr)
        summary['experiment'] = experiment.to_dict()
    _write_json(out / 'summary.json', summary)
    return [out / 'trajectory.csv', out / 'summary.json']


def cmd_measure(cfg: RunConfig, out: Path) -> List[Path]:
    cfg.require('kernel', 'weight', 'norm', 'modes', 'degree', 'gamma', 'sampling')
    spec, f = cfg.kernel.to_spec(), cfg.weight.to_weight()
    M, d = cfg.modes.M, cfg.degree.d
    sampler = BallSampler(M, cfg.norm.s, f, cfg.norm.r, cfg.seed)
    threshold = Threshold(cfg.sampling.threshold)
    normalization = RadiusNormalization(cfg.sampling.radius_normalization)
    gammas = sorted(set(cfg.gamma.sweep) | {cfg.gamma.gamma})
    frame = gamma_sweep(spec, M, d, sampler, gammas, cfg.sampling.n_samples, threshold, normalization)
    out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out / 'gamma_sweep.csv', index=False, float_format="%.17g")
    estimate = resonant_fraction(spec, NonResonanceParams(cfg.gamma.gamma, M, d), sampler,
                                 cfg.sampling.n_samples, threshold, normalization)
    _write_json(out / 'fraction.json', {**estimate.to_dict(), 'sigma': estimate.sigma,
                                        'threshold': threshold.value, 'radius_normalization': normalization.value})
    return [out / 'gamma_sweep.csv', out / 'fraction.json']


def cmd_timeplan(cfg: RunConfig, out: Path) -> List[Path]:
    cfg.require('regime')
    block = cfg.regime
    base = RegimeParams(Regime(block.regime), d=block.d_grid[0], iota=block.iota, a=block.a, s=block.s,
                        weight_parameter=block.weight_parameter, kernel_parameter=block.kernel_parameter)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        frame = regime_sweep(base, block.d_grid)
        report = asymptotic_constant(base, block.d_grid)
    out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out / 'regime_sweep.csv', index=False, float_format="%.17g")
    payload = report.to_dict()
    payload['warnings'] = sorted({str(w.message) for w in caught})
    _write_json(out / 'asymptotics.json', payload)
    return [out / 'regime_sweep.csv', out / 'asymptotics.json']


def cmd_validate(cfg: RunConfig, out: Path) -> List[Path]:
    blocks = [name for name in ('kernel', 'weight', 'norm', 'modes', 'degree', 'gamma', 'simulation',
                                'sampling', 'regime') if getattr(cfg, name) is not None]
    log.info(f"config valid: schema {cfg.schema_version}, seed {cfg.seed}, blocks {', '.join(blocks) or 'none'}")
    return []


COMMANDS: Dict[str, Callable[[RunConfig, Path], List[Path]]] = {
    'normalize': cmd_normalize,
    'simulate': cmd_simulate,
    'measure': cmd_measure,
    'timeplan': cmd_timeplan,
    'validate': cmd_validate,
}


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nekhoroshev-lab",
                                     description="Normal forms, simulations and measure estimates for the nonlocal NLS")
    sub = parser.add_subparsers(dest='command', required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument('--config', required=True, type=Path, help="JSON run configuration")
        cmd.add_argument('--seed', type=int, default=None, help="overrides the config seed")
        cmd.add_argument('--output-dir', type=Path, default=None)
        cmd.add_argument('--log-level', default=None)
        if name == 'simulate':
            cmd.add_argument('--modes', type=int, default=None)
            cmd.add_argument('--dt', type=float, default=None)
            cmd.add_argument('--T', dest='T_end', type=float, default=None)
            cmd.add_argument('--scheme', choices=[s.value for s in Scheme], default=None)
            cmd.add_argument('--radius', type=float, default=None)
            cmd.add_argument('--gamma', type=float, default=None)
    return parser


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    cfg = cfg.with_seed(args.seed)
    if args.command != 'simulate':
        return cfg
    sim = {k: v for k, v in (('M_sim', args.modes), ('dt', args.dt), ('T_end', args.T_end),
                             ('scheme', args.scheme)) if v is not None}
    data = cfg.model_dump()
    if sim and data.get('simulation'):
        data['simulation'].update(sim)
    if args.radius is not None and data.get('norm'):
        data['norm']['r'] = args.radius
    if args.gamma is not None and data.get('gamma'):
        data['gamma']['gamma'] = args.gamma
    return parse_run_config(data)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        cfg = _apply_overrides(load_run_config(args.config), args)
        out = Path(args.output_dir or cfg.output_dir) / args.command
        if args.command != 'validate':
            configure_logging(args.log_level, out / 'run.log')
        written = COMMANDS[args.command](cfg, out)
    except LabError as e:
        log.error(f"{type(e).__name__}: {e.message}")
        print(json.dumps(e.to_dict(), default=str), file=sys.stderr)
        return e.exit_code
    for path in written:
        log.info(f"wrote {path}")
    return 0
