"""Command line entry point: optimize, simulate and compare runs.

    python cli.py optimize --config configs/desk.json --method 1 --method 3
    python cli.py simulate --config configs/desk.json --samples 100
    python cli.py compare --config configs/desk.json
"""
import argparse
import logging
import resource
import sys
import time
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import Config, get_config, load_run_config
from exceptions import HydroValueError, ResourceNotFoundError, ValidationError
from models import PlantTopology, RunConfig, StochasticParams
from plant import reference_plant, validate_topology
from results_store import ResultsStore, reserves_tag
from simulator import profit_statistics, simulate_year
from stochastic import reference_params
from valuation import ValueFunction, backward_induction, check_monotone, nonconcave_weeks, water_values

logger = logging.getLogger(__name__)

AGREEMENT_THRESHOLD = 0.10
REFERENCE_AGREEMENT = 0.80


def configure_logging(cfg: Config) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if cfg.LOG_FILE:
        handlers.append(RotatingFileHandler(cfg.LOG_FILE, maxBytes=cfg.LOG_MAX_BYTES,
                                            backupCount=cfg.LOG_BACKUP_COUNT))
    logging.basicConfig(level=getattr(logging, str(cfg.LOG_LEVEL).upper(), logging.INFO),
                        format=cfg.LOG_FORMAT, handlers=handlers, force=True)


def resolve_inputs(config: RunConfig) -> Tuple[PlantTopology, StochasticParams]:
    """Plant and price/inflow parameters of a run, defaulting to the reference case."""
    plant = validate_topology(config.plant) if config.plant is not None else reference_plant()
    params = config.stochastic if config.stochastic is not None else reference_params()
    if config.horizon_weeks is not None:
        if config.horizon_weeks > params.weeks:
            raise ValidationError(f"horizon of {config.horizon_weeks} weeks exceeds the {params.weeks} "
                                  f"weeks of stochastic parameters")
        params = params.truncated(config.horizon_weeks)
    return plant, params


def _peak_memory_mb() -> float:
    # ru_maxrss is in KiB on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def run_optimize(config: RunConfig, dump_lp_dir: Optional[Path] = None) -> List[ValueFunction]:
    """Build and store the value function of every method and reserve flag.

    Every run starts from the same seed, so all methods and both reserve
    flags see the same weekly draws.
    """
    plant, params = resolve_inputs(config)
    store = ResultsStore(config.output.directory)
    built = []
    for method in config.methods:
        for reserves in config.reserve_flags:
            start = time.perf_counter()
            vf = backward_induction(
                plant, params, config.grids, method, config.n_scenarios,
                np.random.default_rng(config.seed), reserves_enabled=reserves,
                branching=config.branching, shared_reserve=config.shared_reserve_decision,
                workers=config.workers,
                dump_lp_dir=dump_lp_dir / f'm{method}_{reserves_tag(reserves)}' if dump_lp_dir else None,
                trace_stages=dump_lp_dir is not None,
            )
            seconds = time.perf_counter() - start
            store.write_value_function(vf)
            store.write_water_values(water_values(vf), method, reserves)
            store.append_timing(method, reserves, seconds, _peak_memory_mb())
            if vf.stage_traces:
                store.write_stage_traces(vf)
            logger.info(f"Method {method}, reserves {reserves_tag(reserves)}: {seconds:.2f} s")
            built.append(vf)
    return built


def run_simulate(config: RunConfig) -> pd.DataFrame:
    """Simulate every stored value function and write the summary table.

    Raises:
        ResourceNotFoundError: If a requested value function was not built
    """
    plant, params = resolve_inputs(config)
    store = ResultsStore(config.output.directory)
    rows = []
    for method in config.methods:
        for reserves in config.reserve_flags:
            vf = store.read_value_function(method, reserves)
            sim = config.simulation.model_copy(update={'reserves_enabled': reserves})
            result = simulate_year(plant, vf, params, sim)
            store.write_simulation(result)
            rows.append({'method': method, 'reserves': reserves_tag(reserves),
                         'expected_profit': result.stats.expected_profit,
                         'rel_std_pct': result.stats.rel_std_pct, 'cvar10': result.stats.cvar10})
            logger.info(f"Method {method}, reserves {reserves_tag(reserves)}: expected profit "
                        f"{result.stats.expected_profit:.2f} EUR, CVaR10 {result.stats.cvar10:.2f} EUR")
    store.write_summary(rows)
    return pd.DataFrame(rows)


def water_value_agreement(a: ValueFunction, b: ValueFunction, threshold: float = AGREEMENT_THRESHOLD) -> float:
    """Fraction of (week, filling) cells whose water values differ by less than `threshold` relative."""
    wa, wb = water_values(a).values, water_values(b).values
    if wa.shape != wb.shape:
        raise ValidationError(f"water value tables of shapes {wa.shape} and {wb.shape} are not comparable")
    scale = np.maximum(np.abs(wa), np.abs(wb))
    close = np.where(scale > 0, np.abs(wa - wb) < threshold * scale, True)
    return float(close.mean())


def run_compare(config: RunConfig) -> Dict[str, pd.DataFrame]:
    """Side-by-side table of the stored runs plus the method 3/4 agreement.

    Raises:
        ValidationError: If fewer than two methods have stored results
    """
    store = ResultsStore(config.output.directory)
    functions: Dict[Tuple[int, bool], ValueFunction] = {}
    for method in config.methods:
        for reserves in config.reserve_flags:
            try:
                functions[(method, reserves)] = store.read_value_function(method, reserves)
            except ResourceNotFoundError:
                logger.warning(f"No value function for method {method}, reserves {reserves_tag(reserves)}")
    methods = sorted({m for m, _ in functions})
    if len(methods) < 2:
        raise ValidationError(f"compare needs results of at least two methods, found {methods}")

    try:
        timing = store.read_timing()
    except ResourceNotFoundError:
        timing = pd.DataFrame(columns=['method', 'reserves', 'seconds', 'peak_memory_mb'])

    table: Dict[str, Dict[str, float]] = {}
    for (method, reserves), vf in sorted(functions.items()):
        tag = reserves_tag(reserves)
        column = table.setdefault(f'method_{method}', {})
        column[f'monotone_{tag}'] = float(check_monotone(vf))
        column[f'nonconcave_weeks_{tag}'] = float(len(nonconcave_weeks(vf)))
        match = timing[(timing['method'] == method) & (timing['reserves'] == tag)]
        if len(match):
            column[f'optimize_seconds_{tag}'] = float(match['seconds'].iloc[-1])
        try:
            profits = store.read_profits(method, reserves)['profit_eur'].to_numpy()
        except ResourceNotFoundError:
            continue
        stats = profit_statistics(profits)
        column[f'expected_profit_{tag}'] = stats.expected_profit
        column[f'rel_std_pct_{tag}'] = stats.rel_std_pct
        column[f'cvar10_{tag}'] = stats.cvar10

    for column in table.values():
        if 'expected_profit_on' in column and 'expected_profit_off' in column:
            column['reserve_profit_delta'] = column['expected_profit_on'] - column['expected_profit_off']
    if 'method_1' in table:
        for tag in ('off', 'on'):
            base = table['method_1'].get(f'optimize_seconds_{tag}')
            if base:
                for column in table.values():
                    if f'optimize_seconds_{tag}' in column:
                        column[f'time_ratio_to_method_1_{tag}'] = column[f'optimize_seconds_{tag}'] / base

    report = pd.DataFrame(table)
    report.index.name = 'metric'
    store.write_report(report.reset_index(), 'compare.csv')

    agreement_rows = []
    for reserves in config.reserve_flags:
        if (3, reserves) in functions and (4, reserves) in functions:
            fraction = water_value_agreement(functions[(3, reserves)], functions[(4, reserves)])
            agreement_rows.append({'reserves': reserves_tag(reserves), 'fraction_within_10pct': fraction,
                                   'reference_fraction': REFERENCE_AGREEMENT})
            logger.info(f"Methods 3/4 water values agree within 10% on {100 * fraction:.1f}% of cells "
                        f"(reserves {reserves_tag(reserves)})")
    agreement = pd.DataFrame(agreement_rows, columns=['reserves', 'fraction_within_10pct', 'reference_fraction'])
    store.write_report(agreement, 'agreement.csv')
    return {'report': report, 'agreement': agreement}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Water values of a pumped-storage plant with reserve provision')
    sub = parser.add_subparsers(dest='command', required=True)
    for name, text in (('optimize', 'Build value functions and water values'),
                       ('simulate', 'Monte Carlo operation simulation of built value functions'),
                       ('compare', 'Compare methods side by side')):
        p = sub.add_parser(name, help=text)
        p.add_argument('--config', required=True, help='JSON run configuration')
        p.add_argument('--method', type=int, action='append', choices=[1, 2, 3, 4],
                       help='Intrastage method (repeatable)')
        p.add_argument('--reserves', choices=['on', 'off', 'both'])
        p.add_argument('--samples', type=int, help='Monte Carlo samples')
        p.add_argument('--seed', type=int)
        p.add_argument('--out', help='Output directory')
        p.add_argument('--dump-lp', action='store_true', help='Write stage LPs in CPLEX LP format')
        p.add_argument('--log-schedules', action='store_true', help='Write hourly schedules of every sample')
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    simulation = {}
    if args.samples is not None:
        simulation['n_samples'] = args.samples
    if args.seed is not None:
        simulation['seed'] = args.seed
    if args.log_schedules:
        simulation['log_schedules'] = True
    overrides = {'methods': args.method, 'reserves': args.reserves, 'seed': args.seed,
                 'simulation': simulation or None}
    config = load_run_config(args.config, overrides)
    output = {}
    if args.out:
        output['directory'] = args.out
    if args.dump_lp:
        output['dump_lp'] = True
    if output:
        config = config.model_copy(update={'output': config.output.model_copy(update=output)})
    return config


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = get_config()
        configure_logging(cfg)
        config = config_from_args(args)
        if args.command == 'optimize':
            dump_dir = None
            if config.output.dump_lp:
                dump_dir = Path(cfg.DUMP_LP_DIR)
                if not dump_dir.is_absolute():
                    dump_dir = Path(config.output.directory) / dump_dir
            run_optimize(config, dump_dir)
        elif args.command == 'simulate':
            run_simulate(config)
        else:
            run_compare(config)
    except ValidationError as e:
        logger.error(f"Validation error: {e}")
        return 2
    except ResourceNotFoundError as e:
        logger.error(f"Missing resource: {e}")
        return 3
    except HydroValueError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
