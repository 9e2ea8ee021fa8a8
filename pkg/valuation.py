"""Backward stochastic dynamic programming over weeks.

The state is the filling of the seasonal reservoir, the action the net
weekly discharge W (storage decrease including natural inflow). Stage values
come from `intrastage`; they do not depend on the filling, so each stage
evaluates one table over W and reuses it for every grid point.
"""
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from exceptions import HydroValueError, InfeasibleStageError, ValidationError
from intrastage import (Fixing, Schedule, StageInput, best_fixing, dump_stage_lp, fixing_values,
                        reserve_fixings, stage_value)
from models import GridSettings, PlantTopology, StochasticParams
from plant import aggregate_plant, energy_equivalent, seasonal_reservoir
from stochastic import ScenarioTree, WeeklyScenario, build_price_tree, sample_week

logger = logging.getLogger(__name__)

MONOTONE_TOL = 1e-9


@dataclass(frozen=True)
class Grids:
    filling_levels: np.ndarray
    discharge_levels: np.ndarray

    def __post_init__(self):
        for label, levels in (('filling', self.filling_levels), ('discharge', self.discharge_levels)):
            if len(levels) < 2 or (np.diff(levels) <= 0).any():
                raise ValidationError(f"{label} levels must be at least two strictly increasing values")


def build_grids(plant: PlantTopology, params: StochasticParams, settings: GridSettings) -> Grids:
    """Equally spaced fillings and a discharge grid that contains W = 0.

    The discharge range runs from the largest weekly net filling (full
    pumping into the seasonal reservoir plus the largest mean inflow) to the
    largest weekly release; levels above v_max are dropped.
    """
    reservoir = seasonal_reservoir(plant)
    hours = params.hours
    released = hours * sum(u.k * u.p_max for u in plant.turbines if u.from_reservoir == reservoir.id)
    pumped = hours * sum(u.k * u.p_max for u in plant.pumps if u.to_reservoir == reservoir.id)
    inflow = max((max(series) for rid, series in params.inflow_mean.items() if rid == reservoir.id), default=0.0)

    fillings = np.linspace(0.0, reservoir.v_max, settings.n_filling)
    low, high = -(pumped + inflow), released
    if high <= low:
        raise ValidationError(f"seasonal reservoir {reservoir.id} has no discharge range")
    discharge = np.linspace(low, high, settings.n_discharge)
    discharge = np.unique(np.concatenate([discharge, [0.0]]))
    discharge = discharge[(discharge <= reservoir.v_max) & (discharge >= -reservoir.v_max)]
    return Grids(fillings, discharge)


@dataclass(frozen=True)
class StageTrace:
    """One solved stage kept for inspection: the scenario and the schedule that deploys W."""
    week: int
    W: float
    scenario: WeeklyScenario
    schedule: Schedule


@dataclass
class ValueFunction:
    """Profit-to-go tables theta[t - 1, i] = theta_t(filling_levels[i]), t = 1..T+1."""
    theta: np.ndarray
    filling_levels: np.ndarray
    method: int
    reserves_enabled: bool
    discharge_levels: Optional[np.ndarray] = None
    decisions: Optional[np.ndarray] = None
    reserve_choice: Dict[Tuple[int, int], Fixing] = field(default_factory=dict)
    elapsed: float = 0.0
    stage_traces: Dict[int, StageTrace] = field(default_factory=dict)

    @property
    def weeks(self) -> int:
        return self.theta.shape[0] - 1

    @property
    def v_max(self) -> float:
        return float(self.filling_levels[-1])


@dataclass(frozen=True)
class WaterValueTable:
    values: np.ndarray
    midpoints: np.ndarray
    filling_levels: np.ndarray

    def at(self, t: int, v: float) -> float:
        """Slope of theta_t on the filling segment containing v."""
        i = int(np.clip(np.searchsorted(self.filling_levels, v, side='right') - 1, 0, len(self.midpoints) - 1))
        return float(self.values[t - 1, i])


def terminal_water_value(plant: PlantTopology, params: StochasticParams,
                         settings: Optional[GridSettings] = None) -> float:
    """EUR/m3 of water left after the horizon (configured, else mean price x energy equivalent)."""
    if settings is not None and settings.terminal_water_value is not None:
        return settings.terminal_water_value
    return float(np.mean(params.weekly_price_mean)) * energy_equivalent(plant)


def draw_stage_scenarios(params: StochasticParams, week: int, method: int, n_scenarios: int,
                         branching: int, stream: np.random.Generator) -> List[Union[WeeklyScenario, ScenarioTree]]:
    if method == 4:
        return [build_price_tree(params, week, branching, stream) for _ in range(n_scenarios)]
    return [sample_week(params, week, stream) for _ in range(n_scenarios)]


def _stage_column(task) -> np.ndarray:
    """Values of one W level: array (fixings, scenarios), -inf where infeasible."""
    method, plant, W, scenarios, fixings, peak_hours, hours_per_day = task
    table = np.empty((len(fixings), len(scenarios)))
    for s, scenario in enumerate(scenarios):
        values = fixing_values(method, plant, W, scenario, fixings, peak_hours, hours_per_day)
        table[:, s] = [values[q] for q in fixings]
    return table


def stage_table(method: int, plant: PlantTopology, discharge_levels: np.ndarray,
                scenarios: Sequence, fixings: List[Fixing], shared_reserve: bool = True,
                peak_hours=None, hours_per_day: int = 24,
                executor: Optional[ProcessPoolExecutor] = None) -> Tuple[np.ndarray, List[Fixing]]:
    """Expected stage value per W level and the reserve fixing behind it.

    With a shared reserve decision one fixing is chosen for all scenarios of
    the stage; otherwise every scenario picks its own and the reported
    fixing is the first scenario's.
    """
    tasks = [(method, plant, float(W), list(scenarios), fixings, peak_hours, hours_per_day)
             for W in discharge_levels]
    columns = list(executor.map(_stage_column, tasks)) if executor is not None else [_stage_column(t) for t in tasks]

    values = np.full(len(discharge_levels), -np.inf)
    chosen: List[Fixing] = []
    for w, table in enumerate(columns):
        if shared_reserve:
            means = {q: float(table[i].mean()) for i, q in enumerate(fixings)}
            q, value = best_fixing(means)
        else:
            picks = [best_fixing({q: float(table[i, s]) for i, q in enumerate(fixings)})
                     for s in range(table.shape[1])]
            q, value = picks[0][0], float(np.mean([v for _, v in picks]))
        values[w] = value
        chosen.append(q)
    return values, chosen


def feasible_discharges(discharge_levels: np.ndarray, stage_values: np.ndarray, v: float,
                        v_max: float) -> List[Tuple[float, float]]:
    """(W, stage value) pairs that keep v - W inside [0, v_max].

    Grid levels with a finite stage value qualify. The discharge that fills
    the reservoir exactly, W = v - v_max, is added when it falls strictly
    between two finite grid levels, with its stage value interpolated
    linearly between them.
    """
    tol = 1e-9 * max(1.0, v_max)
    pairs = []
    for W, value in zip(discharge_levels, stage_values):
        if not np.isfinite(value) or W > v + tol or v - W > v_max + tol:
            continue
        pairs.append((float(W), float(value)))
    brim = v - v_max
    j = int(np.searchsorted(discharge_levels, brim))
    if 0 < j < len(discharge_levels):
        low, high = discharge_levels[j - 1], discharge_levels[j]
        inside = low + tol < brim < high - tol
        if inside and np.isfinite(stage_values[j - 1]) and np.isfinite(stage_values[j]):
            weight = (brim - low) / (high - low)
            pairs.append((float(brim), float((1 - weight) * stage_values[j - 1] + weight * stage_values[j])))
    return pairs


def bellman_update(stage_values: np.ndarray, discharge_levels: np.ndarray, filling_levels: np.ndarray,
                   theta_next: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """theta_t(v) = max over W with v - W in [0, v_max] of stage(W) + theta_{t+1}(v - W).

    Ties go to the smaller |W|.

    Raises:
        InfeasibleStageError: If some filling has no feasible W
    """
    v_max = filling_levels[-1]
    theta = np.full(len(filling_levels), -np.inf)
    decisions = np.full(len(filling_levels), np.nan)
    for i, v in enumerate(filling_levels):
        candidates = sorted(feasible_discharges(discharge_levels, stage_values, v, v_max),
                            key=lambda pair: (abs(pair[0]), pair[0]))
        for W, value in candidates:
            end = min(max(v - W, 0.0), v_max)
            total = value + float(np.interp(end, filling_levels, theta_next))
            if total > theta[i] + 1e-12 * max(1.0, abs(theta[i])) or not np.isfinite(theta[i]):
                theta[i], decisions[i] = total, W
        if not np.isfinite(theta[i]):
            raise InfeasibleStageError(
                f"no feasible discharge at filling {v:.6g} m3; check the discharge grid"
            )
    return theta, decisions


def nearest_level(levels: np.ndarray, W: float) -> int:
    """Index of the grid level closest to W (the lower one on ties)."""
    return int(np.argmin(np.abs(np.asarray(levels) - W)))


def trace_stage(plant: PlantTopology, params: StochasticParams, method: int, week: int, W: float,
                q: Fixing, scenario: Union[WeeklyScenario, ScenarioTree],
                reserves_enabled: bool) -> Optional[StageTrace]:
    """Re-solve one stage with its reserve fixing and keep the schedule (methods 3 and 4)."""
    if method not in (3, 4):
        return None
    stage = StageInput(plant=plant, W=W, scenario=scenario, reserves_enabled=reserves_enabled,
                       q_fixed=q, peak_hours=params.peak_hours, hours_per_day=params.hours_per_day)
    try:
        result = stage_value(method, stage)
    except InfeasibleStageError as e:
        logger.warning(f"Week {week}: no schedule traced for W = {W:.6g} m3: {e}")
        return None
    shown = scenario.path_scenario(0) if isinstance(scenario, ScenarioTree) else scenario
    return StageTrace(week=week, W=W, scenario=shown, schedule=result.schedule)


def backward_induction(plant: PlantTopology, params: StochasticParams,
                       grids: Union[Grids, GridSettings], method: int, n_scenarios: int,
                       stream: np.random.Generator, reserves_enabled: bool = True,
                       branching: int = 2, shared_reserve: bool = True, workers: int = 1,
                       dump_lp_dir: Optional[Union[str, Path]] = None,
                       terminal_value: Optional[float] = None, trace_stages: bool = False) -> ValueFunction:
    """Build the profit-to-go functions of every week.

    Scenario draws of a stage are taken from `stream` before any evaluation
    and reused for every (filling, W) pair of the stage.

    Args:
        plant: Full plant; methods 1 and 2 aggregate it themselves
        params: Price/inflow process, one entry per week of the horizon
        grids: Explicit grids or the settings to build them from
        method: Intrastage method, 1 to 4
        n_scenarios: Weeks (method 4: trees) drawn per stage
        stream: Random stream; consumed stage by stage from the last week
        reserves_enabled: Whether reserve commitments may be offered
        branching: Daily branching factor of method 4 trees
        shared_reserve: One reserve decision per stage instead of per scenario
        workers: Processes evaluating W levels in parallel
        dump_lp_dir: Write each week's W = 0 stage LP there
        terminal_value: EUR/m3 of water left after the horizon; overrides
            the grid settings and the price-based default
        trace_stages: Keep the first scenario and the schedule of every week
            (methods 3 and 4), solved at the decision of the filling closest
            to the initial one

    Returns:
        ValueFunction: theta for weeks 1..T+1

    Raises:
        ValidationError: On bad arguments
        InfeasibleStageError: If a filling grid point has no feasible W
        HydroValueError: If the result is not monotone in the filling
    """
    if method not in (1, 2, 3, 4):
        raise ValidationError(f"unknown method {method}")
    if n_scenarios < 1:
        raise ValidationError("n_scenarios must be >= 1")
    settings = grids if isinstance(grids, GridSettings) else None
    if settings is not None:
        grids = build_grids(plant, params, settings)

    start = time.perf_counter()
    fixing_plant = aggregate_plant(plant) if method in (1, 2) else plant
    fixings = reserve_fixings(fixing_plant, reserves_enabled)
    T = params.weeks
    fillings = grids.filling_levels
    theta = np.zeros((T + 1, len(fillings)))
    if terminal_value is None:
        terminal_value = terminal_water_value(plant, params, settings)
    theta[T] = terminal_value * fillings
    decisions = np.zeros((T, len(fillings)))
    reserve_choice: Dict[Tuple[int, int], Fixing] = {}
    traces: Dict[int, StageTrace] = {}
    start_index = nearest_level(fillings, seasonal_reservoir(plant).v_init)

    logger.info(f"Backward induction: method {method}, reserves {'on' if reserves_enabled else 'off'}, "
                f"{T} weeks, {len(fillings)} fillings x {len(grids.discharge_levels)} discharges")
    executor = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for week in range(T, 0, -1):
            scenarios = draw_stage_scenarios(params, week, method, n_scenarios, branching, stream)
            if dump_lp_dir is not None and method != 2:
                stage = StageInput(plant=plant, W=0.0, scenario=scenarios[0],
                                   reserves_enabled=reserves_enabled, peak_hours=params.peak_hours,
                                   hours_per_day=params.hours_per_day)
                dump_stage_lp(method, stage, Path(dump_lp_dir) / f'method{method}_week{week:02d}.lp')
            values, chosen = stage_table(method, plant, grids.discharge_levels, scenarios, fixings,
                                         shared_reserve, params.peak_hours, params.hours_per_day, executor)
            theta[week - 1], decisions[week - 1] = bellman_update(values, grids.discharge_levels, fillings, theta[week])
            for i, W in enumerate(decisions[week - 1]):
                reserve_choice[(week, i)] = chosen[nearest_level(grids.discharge_levels, W)]
            if trace_stages:
                W = float(decisions[week - 1][start_index])
                trace = trace_stage(plant, params, method, week, W, reserve_choice[(week, start_index)],
                                    scenarios[0], reserves_enabled)
                if trace is not None:
                    traces[week] = trace
            logger.debug(f"Week {week}: theta in [{theta[week - 1].min():.6g}, {theta[week - 1].max():.6g}]")
    except Exception as e:
        logger.error(f"Error in backward induction of method {method}: {e}")
        if isinstance(e, HydroValueError):
            raise
        raise HydroValueError(f"Backward induction of method {method} failed: {str(e)}")
    finally:
        if executor is not None:
            executor.shutdown()

    vf = ValueFunction(theta=theta, filling_levels=fillings, method=method, reserves_enabled=reserves_enabled,
                       discharge_levels=grids.discharge_levels, decisions=decisions,
                       reserve_choice=reserve_choice, elapsed=time.perf_counter() - start,
                       stage_traces=traces)
    if not check_monotone(vf):
        raise HydroValueError(f"method {method}: profit-to-go is not monotone in the filling")
    logger.info(f"Method {method} value function built in {vf.elapsed:.2f} s")
    return vf


def interpolate_value(vf: ValueFunction, t: int, v: float) -> float:
    """Piecewise-linear theta_t(v) without concavification.

    Raises:
        ValidationError: If t or v is out of range
    """
    if not 1 <= t <= vf.weeks + 1:
        raise ValidationError(f"week {t} outside 1..{vf.weeks + 1}")
    tol = 1e-9 * max(1.0, vf.v_max)
    if v < -tol or v > vf.v_max + tol:
        raise ValidationError(f"filling {v} outside [0, {vf.v_max}]")
    return float(np.interp(v, vf.filling_levels, vf.theta[t - 1]))


def water_values(vf: ValueFunction) -> WaterValueTable:
    """Forward-difference gradients of theta, EUR/m3, per week and filling segment."""
    dv = np.diff(vf.filling_levels)
    values = np.diff(vf.theta, axis=1) / dv
    midpoints = 0.5 * (vf.filling_levels[1:] + vf.filling_levels[:-1])
    return WaterValueTable(values=values, midpoints=midpoints, filling_levels=vf.filling_levels)


def check_monotone(vf: ValueFunction, tol: float = MONOTONE_TOL) -> bool:
    steps = np.diff(vf.theta, axis=1)
    scale = max(1.0, float(np.abs(vf.theta).max()))
    ok = bool((steps >= -tol * scale).all())
    if not ok:
        t, i = np.unravel_index(int(np.argmin(steps)), steps.shape)
        logger.warning(f"theta of week {t + 1} decreases between fillings {i} and {i + 1}")
    return ok


def nonconcave_weeks(vf: ValueFunction, tol: float = 1e-9) -> List[int]:
    """Weeks whose theta fails the midpoint concavity test somewhere."""
    theta = vf.theta
    v = vf.filling_levels
    weeks = []
    for t in range(theta.shape[0]):
        # value of the chord at each interior grid point
        w = (v[1:-1] - v[:-2]) / (v[2:] - v[:-2])
        chord = (1 - w) * theta[t, :-2] + w * theta[t, 2:]
        scale = max(1.0, float(np.abs(theta[t]).max()))
        if (theta[t, 1:-1] < chord - tol * scale).any():
            weeks.append(t + 1)
    return weeks
