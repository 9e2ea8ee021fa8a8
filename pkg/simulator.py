"""Monte Carlo simulation of a year of operation under a value function.

Each week the simulator samples prices and inflows, decides on the reserve
offer with the expected week, and dispatches the plant hour by hour by
comparing prices with the water value at the current seasonal filling.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from exceptions import HydroValueError, SimulationError, ValidationError
from intrastage import Fixing, method3_fixing_values, reserve_fixings
from models import PlantTopology, SimConfig, StochasticParams, Unit
from plant import energy_equivalent, reservoir_energy, seasonal_reservoir
from stochastic import WeeklyScenario, expected_week, sample_week
from valuation import ValueFunction, feasible_discharges, interpolate_value, water_values

logger = logging.getLogger(__name__)

AUDIT_TOL = 1e-6
SCORE_TOL = 1e-7


def sample_stream(seed: int, sample: int, week: int) -> np.random.Generator:
    """Random stream of one (sample, week), independent of scheduling."""
    return np.random.default_rng(np.random.SeedSequence([seed, sample, week]))


@dataclass
class ProfitStats:
    expected_profit: float
    rel_std: float
    cvar10: float
    n: int

    @property
    def rel_std_pct(self) -> float:
        return 100.0 * self.rel_std


def profit_statistics(profits: Sequence[float]) -> ProfitStats:
    """Mean, relative sample standard deviation and mean of the worst 10%.

    Raises:
        ValidationError: If no profit is given
    """
    profits = np.asarray(profits, dtype=float)
    n = len(profits)
    if n == 0:
        raise ValidationError("profit statistics need at least one profit")
    mean = float(profits.mean())
    std = float(profits.std(ddof=1)) if n > 1 else 0.0
    if std == 0.0:
        rel_std = 0.0
    else:
        rel_std = std / mean if mean != 0 else float('nan')
    worst = -(-n // 10)
    cvar10 = float(np.sort(profits)[:worst].mean())
    return ProfitStats(expected_profit=mean, rel_std=rel_std, cvar10=cvar10, n=n)


def dispatch_thresholds(plant: PlantTopology, wv: float, gen_margin: float = 0.0,
                        pump_margin: float = 0.0) -> Tuple[float, Dict[str, float]]:
    """EUR/MWh cut-offs: generate above the first, pump unit j below its entry.

    Water in a reservoir is valued at `wv` scaled by its energy content
    relative to seasonal water, so a pump is credited only with the value it
    adds over the water it lifts. A pump cut-off never exceeds the
    generation cut-off.
    """
    ee = energy_equivalent(plant)
    generate = (1.0 + gen_margin) * wv / ee if ee > 0 else np.inf
    seasonal = seasonal_reservoir(plant).id

    def relative_value(reservoir_id) -> float:
        if ee > 0:
            return reservoir_energy(plant, reservoir_id) / ee
        return 1.0 if reservoir_id == seasonal else 0.0

    pump = {}
    for u in plant.pumps:
        net = wv * u.k * (relative_value(u.to_reservoir) - relative_value(u.from_reservoir))
        if ee > 0:
            net = min(net, wv / ee)
        pump[u.id] = (1.0 - pump_margin) * net
    return generate, pump


def _upstream_order(plant: PlantTopology) -> List[str]:
    """Reservoir ids ordered so that every turbine's source precedes its sink."""
    indegree = {r.id: 0 for r in plant.reservoirs}
    for u in plant.turbines:
        if u.to_reservoir is not None:
            indegree[u.to_reservoir] += 1
    order, ready = [], [r.id for r in plant.reservoirs if indegree[r.id] == 0]
    while ready:
        rid = ready.pop(0)
        order.append(rid)
        for u in plant.turbines:
            if u.from_reservoir == rid and u.to_reservoir is not None:
                indegree[u.to_reservoir] -= 1
                if indegree[u.to_reservoir] == 0:
                    ready.append(u.to_reservoir)
    return order


@dataclass
class WeekDispatch:
    profit: float
    reserve_income: float
    fillings: Dict[str, float]
    inflow: Dict[str, float]
    received: Dict[str, float]
    released: Dict[str, float]
    spilled: Dict[str, float]
    band_violations: int = 0
    schedule: Optional[pd.DataFrame] = None

    def audit(self, start: Dict[str, float]) -> Dict[str, float]:
        """Per-reservoir mass-balance residual of the week (m3)."""
        return {
            rid: self.fillings[rid] - (start[rid] + self.inflow[rid] + self.received[rid]
                                       - self.released[rid] - self.spilled[rid])
            for rid in start
        }


def dispatch_heuristic(plant: PlantTopology, fillings: Dict[str, float], scenario: WeeklyScenario,
                       wv: float, q: Fixing, gen_margin: float = 0.0, pump_margin: float = 0.0,
                       log: bool = False) -> WeekDispatch:
    """Hourly rule-based dispatch of one week.

    Committed turbines run at their set point; in hours priced above the
    generation threshold every turbine runs as high as water, downstream
    space and its band allow; in any other hour priced below a pump's
    threshold the pump runs as high as it can. Obligations are propagated upstream so cascades feed
    committed turbines, and market generation never touches the water the
    rest of the week's obligations need. Excess water above v_max is spilled.

    Args:
        plant: Full plant topology
        fillings: Start-of-week volume per reservoir id
        scenario: Realised week
        wv: Water value of the seasonal reservoir, EUR/m3
        q: Reserve commitment per reserve-qualified turbine
        log: Keep the hourly schedule as a DataFrame

    Returns:
        WeekDispatch: Profit, end fillings and the water accounting
    """
    reserve_units = plant.reserve_units
    if len(q) != len(reserve_units):
        raise ValidationError(f"q vector {q} does not match {len(reserve_units)} reserve-qualified turbines")
    committed = {u.id for u, qi in zip(reserve_units, q) if qi}
    gen_threshold, pump_thresholds = dispatch_thresholds(plant, wv, gen_margin, pump_margin)
    order = _upstream_order(plant)
    caps = {r.id: r.v_max for r in plant.reservoirs}
    turbines = plant.turbines
    by_source: Dict[str, List[Unit]] = {rid: [u for u in turbines if u.from_reservoir == rid] for rid in order}
    feeders: Dict[str, List[Unit]] = {rid: [u for u in turbines if u.to_reservoir == rid] for rid in order}
    obligation_rate = sum(u.k * u.setpoint for u in turbines if u.id in committed and u.to_reservoir is None)

    v = dict(fillings)
    zeros = {rid: 0.0 for rid in caps}
    inflow, received, released, spilled = dict(zeros), dict(zeros), dict(zeros), dict(zeros)
    hours = scenario.hours
    profit, violations = 0.0, 0
    rows = []

    def upper(u: Unit) -> float:
        return u.p_max - u.q_max if u.id in committed else u.p_max

    for h in range(hours):
        price = float(scenario.prices[h])
        arrived = 0.0
        for rid in caps:
            a = float(scenario.inflow(rid)[h])
            v[rid] += a
            inflow[rid] += a
            arrived += a

        generate = price > gen_threshold
        target = {u.id: (upper(u) if generate else (u.setpoint if u.id in committed else 0.0)) for u in turbines}

        # feed downstream demand from upstream turbines, most downstream first
        for rid in reversed(order):
            deficit = sum(u.k * target[u.id] for u in by_source[rid]) - v[rid]
            for f in feeders[rid]:
                if deficit <= 0:
                    break
                extra = min(deficit / f.k, upper(f) - target[f.id])
                if extra > 0:
                    target[f.id] += extra
                    deficit -= extra * f.k

        # water that may leave the plant this hour beyond the set points
        remaining = obligation_rate * (hours - h - 1)
        budget = sum(v.values()) - remaining - obligation_rate
        power = {}
        for rid in order:
            for u in by_source[rid]:
                p = min(target[u.id], max(v[rid], 0.0) / u.k)
                if u.to_reservoir is None:
                    base = min(p, u.setpoint) if u.id in committed else 0.0
                    p = base + min(p - base, max(budget, 0.0) / u.k)
                    budget -= (p - base) * u.k
                else:
                    sink = u.to_reservoir
                    planned_out = sum(w.k * target[w.id] for w in by_source[sink])
                    space = caps[sink] - v[sink] + planned_out
                    p = min(p, max(space, 0.0) / u.k)
                    v[sink] += u.k * p
                    received[sink] += u.k * p
                v[rid] -= u.k * p
                released[rid] += u.k * p
                power[u.id] = p
                if u.id in committed and not u.setpoint - 1e-9 <= p <= u.p_max - u.q_max + 1e-9:
                    violations += 1

        for u in plant.pumps:
            p = 0.0
            if not generate and price < pump_thresholds[u.id]:
                p = u.p_max
                if u.from_reservoir is not None:
                    p = min(p, max(v[u.from_reservoir], 0.0) / u.k)
                p = min(p, max(caps[u.to_reservoir] - v[u.to_reservoir], 0.0) / u.k)
                if u.from_reservoir is not None:
                    v[u.from_reservoir] -= u.k * p
                    released[u.from_reservoir] += u.k * p
                v[u.to_reservoir] += u.k * p
                received[u.to_reservoir] += u.k * p
            power[u.id] = p

        spill = 0.0
        for rid, cap in caps.items():
            if v[rid] > cap:
                spilled[rid] += v[rid] - cap
                spill += v[rid] - cap
                v[rid] = cap
            elif v[rid] < 0.0:
                # rounding residue of an emptied reservoir
                v[rid] = 0.0

        generated = sum(power[u.id] for u in turbines)
        pumped = sum(power[u.id] for u in plant.pumps)
        market = generated - pumped
        profit += price * market
        if log:
            row = {'hour': h + 1, 'price': price, 'inflow': arrived, 'u': generated, 'p': pumped,
                   's': spill, 'm': market}
            row.update({f'v_{rid}': v[rid] for rid in caps})
            rows.append(row)

    reserve_income = sum(u.q_max for u in reserve_units if u.id in committed) * scenario.reserve_price * hours
    return WeekDispatch(
        profit=profit + reserve_income, reserve_income=reserve_income, fillings=v,
        inflow=inflow, received=received, released=released, spilled=spilled,
        band_violations=violations, schedule=pd.DataFrame(rows) if log else None,
    )


class ReserveOfferPlanner:
    """Weekly reserve offering decisions on the expected week.

    For every week and reserve fixing the method 3 LP of the expected week is
    solved once on the value function's discharge grid; a decision then
    picks the fixing maximising LP value plus the profit-to-go of the filling
    left after the discharge.
    """

    def __init__(self, plant: PlantTopology, vf: ValueFunction, params: StochasticParams):
        if vf.discharge_levels is None:
            raise ValidationError("value function carries no discharge grid")
        self.plant = plant
        self.vf = vf
        self.params = params
        self.fixings = reserve_fixings(plant, True)
        self._tables: Dict[int, Dict[Fixing, np.ndarray]] = {}

    def table(self, week: int) -> Dict[Fixing, np.ndarray]:
        if week not in self._tables:
            forecast = expected_week(self.params, week)
            per_w = [method3_fixing_values(self.plant, float(W), forecast, self.fixings)
                     for W in self.vf.discharge_levels]
            self._tables[week] = {q: np.array([row[q] for row in per_w]) for q in self.fixings}
        return self._tables[week]

    def prepare(self) -> 'ReserveOfferPlanner':
        for week in range(1, self.vf.weeks + 1):
            self.table(week)
        return self

    def score(self, week: int, filling: float, q: Fixing) -> float:
        v_max = self.vf.v_max
        best = -np.inf
        for W, value in feasible_discharges(self.vf.discharge_levels, self.table(week)[q], filling, v_max):
            end = min(max(filling - W, 0.0), v_max)
            best = max(best, value + interpolate_value(self.vf, week + 1, end))
        return best

    def decide(self, week: int, fillings: Dict[str, float], forecast: WeeklyScenario) -> Fixing:
        seasonal = seasonal_reservoir(self.plant).id
        available = sum(fillings.values()) + forecast.total_inflow()
        best_q, best = None, -np.inf
        for q in self.fixings:
            obligation = sum(qi * u.k * u.setpoint for qi, u in zip(q, self.plant.reserve_units)) * forecast.hours
            if obligation > available:
                continue
            s = self.score(week, fillings[seasonal], q)
            if best_q is None or s > best + SCORE_TOL * max(1.0, abs(best)):
                best_q, best = q, s
        if best_q is None or not np.isfinite(best):
            return (0,) * len(self.plant.reserve_units)
        return best_q


def reserve_offer_decision(plant: PlantTopology, vf: ValueFunction, params: StochasticParams,
                           week: int, fillings: Dict[str, float], reserves_enabled: bool = True,
                           planner: Optional[ReserveOfferPlanner] = None) -> Fixing:
    """Reserve commitment for `week` given the start-of-week fillings."""
    if not reserves_enabled or not plant.reserve_units:
        return (0,) * len(plant.reserve_units)
    planner = planner or ReserveOfferPlanner(plant, vf, params)
    return planner.decide(week, fillings, expected_week(params, week))


@dataclass
class SampleRun:
    profit: float
    filling_path: np.ndarray
    spill: float
    audit_residual: float
    band_violations: int
    reserve_weeks: int
    schedule: Optional[pd.DataFrame] = None


def simulate_sample(plant: PlantTopology, vf: ValueFunction, params: StochasticParams,
                    sim: SimConfig, sample: int, planner: Optional[ReserveOfferPlanner]) -> SampleRun:
    seasonal = seasonal_reservoir(plant).id
    fillings = {r.id: r.v_init for r in plant.reservoirs}
    table = water_values(vf)
    weeks = vf.weeks
    path = np.empty(weeks + 1)
    path[0] = fillings[seasonal]
    profit = spill = residual = 0.0
    violations = reserve_weeks = 0
    frames = []

    for week in range(1, weeks + 1):
        scenario = sample_week(params, week, sample_stream(sim.seed, sample, week))
        wv = max(table.at(week + 1, fillings[seasonal]), 0.0)
        if sim.reserves_enabled and planner is not None:
            q = planner.decide(week, fillings, expected_week(params, week))
        else:
            q = (0,) * len(plant.reserve_units)
        start = dict(fillings)
        result = dispatch_heuristic(plant, fillings, scenario, wv, q, sim.gen_threshold_margin,
                                    sim.pump_threshold_margin, log=sim.log_schedules)
        audit = result.audit(start)
        residual = max(residual, max(abs(r) for r in audit.values()))
        fillings = result.fillings
        profit += result.profit
        spill += sum(result.spilled.values())
        violations += result.band_violations
        reserve_weeks += int(any(q))
        path[week] = fillings[seasonal]
        if result.schedule is not None:
            frame = result.schedule
            frame.insert(0, 'week', week)
            frame.insert(0, 'sample', sample)
            frame['filling'] = frame[f'v_{seasonal}']
            frames.append(frame)

    return SampleRun(profit=profit, filling_path=path, spill=spill, audit_residual=residual,
                     band_violations=violations, reserve_weeks=reserve_weeks,
                     schedule=pd.concat(frames, ignore_index=True) if frames else None)


def _run_sample(task) -> SampleRun:
    return simulate_sample(*task)


@dataclass
class SimulationResult:
    method: int
    reserves_enabled: bool
    profits: np.ndarray
    filling_paths: np.ndarray
    spill_total: np.ndarray
    stats: ProfitStats
    audit_residuals: np.ndarray
    band_violations: np.ndarray
    reserve_weeks: np.ndarray
    schedules: Optional[pd.DataFrame] = field(default=None, repr=False)


def simulate_year(plant: PlantTopology, vf: ValueFunction, params: StochasticParams,
                  sim: SimConfig) -> SimulationResult:
    """Replay the horizon for `sim.n_samples` samples.

    Samples run in parallel when `sim.workers > 1`; every sample owns its
    random streams and results are merged in sample order.

    Returns:
        SimulationResult: Profits, filling paths and their statistics
    """
    if params.weeks < vf.weeks:
        raise ValidationError(f"value function covers {vf.weeks} weeks, parameters only {params.weeks}")
    planner = None
    if sim.reserves_enabled and plant.reserve_units:
        planner = ReserveOfferPlanner(plant, vf, params).prepare()

    tasks = [(plant, vf, params, sim, s, planner) for s in range(sim.n_samples)]
    logger.info(f"Simulating {sim.n_samples} samples of {vf.weeks} weeks (method {vf.method}, "
                f"reserves {'on' if sim.reserves_enabled else 'off'})")
    try:
        if sim.workers > 1:
            with ProcessPoolExecutor(max_workers=sim.workers) as executor:
                runs = list(executor.map(_run_sample, tasks))
        else:
            runs = [_run_sample(t) for t in tasks]
    except Exception as e:
        logger.error(f"Error simulating method {vf.method}: {e}")
        if isinstance(e, HydroValueError):
            raise
        raise SimulationError(f"Simulation of method {vf.method} failed: {str(e)}")

    profits = np.array([r.profit for r in runs])
    residuals = np.array([r.audit_residual for r in runs])
    worst = float(residuals.max()) if len(residuals) else 0.0
    if worst > AUDIT_TOL * max(r.v_max for r in plant.reservoirs):
        logger.warning(f"Water audit residual {worst:.3g} m3 exceeds tolerance")
    schedules = [r.schedule for r in runs if r.schedule is not None]
    return SimulationResult(
        method=vf.method, reserves_enabled=sim.reserves_enabled, profits=profits,
        filling_paths=np.vstack([r.filling_path for r in runs]),
        spill_total=np.array([r.spill for r in runs]),
        stats=profit_statistics(profits), audit_residuals=residuals,
        band_violations=np.array([r.band_violations for r in runs]),
        reserve_weeks=np.array([r.reserve_weeks for r in runs]),
        schedules=pd.concat(schedules, ignore_index=True) if schedules else None,
    )
