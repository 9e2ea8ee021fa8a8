"""Weekly stage values for a given net seasonal discharge W.

Method 1 values the week with aggregated peak/off-peak prices, method 2
with a price duration curve, method 3 with an hourly LP under perfect
weekly foresight and method 4 with the deterministic equivalent of a
daily-branching price tree. Methods 1 and 2 work on the aggregated plant.

Every evaluator can report its value per reserve fixing q (one 0/1 entry
per reserve-qualified turbine); the master problem combines those into
here-and-now or per-scenario reserve decisions.
"""
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.sparse as sp

from exceptions import InfeasibleStageError, ValidationError
from models import PlantTopology
from plant import aggregate_plant, seasonal_reservoir
from solver import LinearProgram, Solution, solve_lp, solve_with_binaries, write_lp
from stochastic import (PeakMask, ScenarioTree, WeeklyScenario, aggregate_peak_offpeak, make_pdc,
                        peak_mask_from)

logger = logging.getLogger(__name__)

Fixing = Tuple[int, ...]
ScenarioInput = Union[WeeklyScenario, Sequence[WeeklyScenario], ScenarioTree]

METHODS = (1, 2, 3, 4)


@dataclass(frozen=True)
class StageInput:
    plant: PlantTopology
    W: float
    scenario: ScenarioInput
    reserves_enabled: bool = True
    v_big_prev: Optional[float] = None
    q_fixed: Optional[Fixing] = None
    peak_hours: Optional[PeakMask] = None
    hours_per_day: int = 24
    shared_reserve: bool = True

    def __post_init__(self):
        if self.v_big_prev is not None:
            v_max = seasonal_reservoir(self.plant).v_max
            if not -1e-9 * v_max <= self.v_big_prev - self.W <= v_max * (1 + 1e-9):
                raise ValidationError(
                    f"filling {self.v_big_prev} minus W {self.W} leaves the reservoir range [0, {v_max}]"
                )

    @property
    def scenarios(self) -> List[WeeklyScenario]:
        if isinstance(self.scenario, WeeklyScenario):
            return [self.scenario]
        if isinstance(self.scenario, ScenarioTree):
            return self.scenario.leaf_scenarios()
        return list(self.scenario)


@dataclass
class Schedule:
    """Hourly (or per-bundle) operation of a plant.

    Arrays are indexed by node; in an hourly schedule node i is hour i.
    `power` holds the output of every unit in MW (pumps report their
    consumption as positive numbers).
    """
    node_hour: np.ndarray
    node_probability: np.ndarray
    unit_ids: Tuple[str, ...]
    reservoir_ids: Tuple[str, ...]
    power: np.ndarray
    v_small: np.ndarray
    spill: np.ndarray
    market: np.ndarray
    seasonal_spill: np.ndarray
    scenario_nodes: np.ndarray
    turbine_mask: np.ndarray = field(repr=False, default=None)

    def unit_power(self, unit_id: str) -> np.ndarray:
        return self.power[:, self.unit_ids.index(unit_id)]

    def for_scenario(self, s: int) -> 'Schedule':
        """The hourly schedule seen along one scenario path."""
        nodes = self.scenario_nodes[s]
        return Schedule(
            node_hour=self.node_hour[nodes], node_probability=np.ones(len(nodes)),
            unit_ids=self.unit_ids, reservoir_ids=self.reservoir_ids,
            power=self.power[nodes], v_small=self.v_small[nodes], spill=self.spill[nodes],
            market=self.market[nodes], seasonal_spill=self.seasonal_spill[[s]],
            scenario_nodes=np.arange(len(nodes))[None, :], turbine_mask=self.turbine_mask,
        )

    def to_frame(self) -> pd.DataFrame:
        offsets = np.searchsorted(self.node_hour, self.node_hour, side='left')
        frame = pd.DataFrame({
            'hour': self.node_hour + 1,
            'bundle': np.arange(len(self.node_hour)) - offsets,
            'probability': self.node_probability,
            'u': self.power[:, self.turbine_mask].sum(axis=1),
            'p': self.power[:, ~self.turbine_mask].sum(axis=1),
            's': self.spill.sum(axis=1) if self.spill.size else 0.0,
            'm': self.market,
            'v_small': self.v_small.sum(axis=1) if self.v_small.size else 0.0,
        })
        for j, uid in enumerate(self.unit_ids):
            frame[f'power_{uid}'] = self.power[:, j]
        return frame


@dataclass
class StageResult:
    value: float
    q: Fixing
    schedule: Optional[Schedule] = None
    details: Dict[str, float] = field(default_factory=dict)


def reserve_fixings(plant: PlantTopology, reserves_enabled: bool,
                    q_fixed: Optional[Fixing] = None) -> List[Fixing]:
    """Reserve fixings to evaluate, in lexicographic order."""
    n = len(plant.reserve_units)
    if q_fixed is not None:
        q_fixed = tuple(int(q) for q in q_fixed)
        if len(q_fixed) != n:
            raise ValidationError(f"q vector {q_fixed} does not match {n} reserve-qualified turbines")
        if any(q_fixed) and not reserves_enabled:
            raise ValidationError("reserve commitment requested with reserves disabled")
        return [q_fixed]
    if not reserves_enabled:
        return [(0,) * n]
    return list(itertools.product((0, 1), repeat=n))


def best_fixing(values: Dict[Fixing, float]) -> Tuple[Fixing, float]:
    """Maximising fixing; ties go to the lexicographically smaller vector."""
    best_q, best_v = None, -np.inf
    for q in sorted(values):
        v = values[q]
        if best_q is None or v > best_v + 1e-9 * max(1.0, abs(best_v)):
            best_q, best_v = q, v
    return best_q, best_v


# ---------------------------------------------------------------- method 1

def _agg_units(plant: PlantTopology):
    agg = aggregate_plant(plant)
    turbine = agg.turbines[0] if agg.turbines else None
    pump = agg.pumps[0] if agg.pumps else None
    return agg, agg.reservoirs[0], turbine, pump


def _method1_program(plant: PlantTopology, W: float, scenario: WeeklyScenario,
                     reserves_enabled: bool, peak_hours: Optional[PeakMask],
                     hours_per_day: int) -> Tuple[LinearProgram, List[int]]:
    agg, reservoir, turbine, pump = _agg_units(plant)
    hours = scenario.hours
    mask = peak_mask_from(peak_hours, hours, hours_per_day)
    n_pk, n_off = int(mask.sum()), int((~mask).sum())
    c_pk, c_off = aggregate_peak_offpeak(scenario, mask)

    u_max, k_u = (turbine.p_max, turbine.k) if turbine else (0.0, 0.0)
    p_max, k_p = (pump.p_max, pump.k) if pump else (0.0, 0.0)
    has_band = bool(agg.reserve_units)
    q_max = turbine.q_max if has_band else 0.0
    setpoint = turbine.setpoint if has_band else 0.0

    # x = [u, p, s, q]
    objective = np.array([
        c_pk * n_pk,
        -c_off * n_off,
        0.0,
        q_max * scenario.reserve_price * hours + setpoint * c_off * n_off,
    ])
    A_eq = np.array([[n_pk * k_u, -n_off * k_p, 1.0, k_u * setpoint * n_off]])
    b_eq = np.array([W + scenario.total_inflow()])
    A_ub = np.array([[-1.0, 0.0, 0.0, setpoint],
                     [1.0, 0.0, 0.0, q_max]])
    b_ub = np.array([0.0, u_max])
    ub = np.array([u_max, p_max, reservoir.spill_max * hours, 1.0 if (has_band and reserves_enabled) else 0.0])
    lp = LinearProgram(objective, A_eq, b_eq, A_ub, b_ub, np.zeros(4), ub, names=['u', 'p', 's', 'q'])
    return lp, ([3] if has_band else [])


def _fixed(lp: LinearProgram, q_idx: List[int], fixing: Fixing) -> Optional[LinearProgram]:
    if not q_idx:
        return lp
    values = np.asarray(fixing, dtype=float)
    if (values > lp.ub[q_idx]).any():
        return None
    lb, ub = lp.lb.copy(), lp.ub.copy()
    lb[q_idx] = values
    ub[q_idx] = values
    return lp.with_bounds(lb, ub)


def _values_by_fixing(lp: LinearProgram, q_idx: List[int],
                      fixings: List[Fixing]) -> Dict[Fixing, Solution]:
    out = {}
    for fixing in fixings:
        fixed = _fixed(lp, q_idx, fixing)
        if fixed is not None:
            out[fixing] = solve_lp(fixed)
    return out


def method1_fixing_values(plant: PlantTopology, W: float, scenario: WeeklyScenario,
                          fixings: List[Fixing], peak_hours: Optional[PeakMask] = None,
                          hours_per_day: int = 24) -> Dict[Fixing, float]:
    lp, q_idx = _method1_program(plant, W, scenario, True, peak_hours, hours_per_day)
    return {q: sol.objective_value for q, sol in _values_by_fixing(lp, q_idx, fixings).items()}


def method1_stage_value(stage: StageInput) -> StageResult:
    """Weekly LP with one peak and one off-peak price level.

    Raises:
        InfeasibleStageError: If W cannot be reached for any reserve fixing
    """
    agg = aggregate_plant(stage.plant)
    fixings = reserve_fixings(agg, stage.reserves_enabled, stage.q_fixed)
    results = []
    for scenario in stage.scenarios:
        lp, q_idx = _method1_program(stage.plant, stage.W, scenario, stage.reserves_enabled,
                                     stage.peak_hours, stage.hours_per_day)
        results.append(_values_by_fixing(lp, q_idx, fixings))
    return _combine(results, fixings, stage, method=1, extract=_method1_details)


def _method1_details(sol: Solution) -> Dict[str, float]:
    return dict(zip(('u', 'p', 's', 'q'), (float(v) for v in sol.x)))


# ---------------------------------------------------------------- method 2

def method2_fixing_values(plant: PlantTopology, W: float, scenario: WeeklyScenario,
                          fixings: List[Fixing]) -> Dict[Fixing, Tuple[float, Dict[str, float]]]:
    """Exhaustive search over generating/pumping hours for each fixing."""
    agg, reservoir, turbine, pump = _agg_units(plant)
    hours = scenario.hours
    pdc = make_pdc(scenario)
    cum = pdc.cumulative
    total = cum[-1]

    u_max, k_u = (turbine.p_max, turbine.k) if turbine else (0.0, 0.0)
    p_max, k_p = (pump.p_max, pump.k) if pump else (0.0, 0.0)
    has_band = bool(agg.reserve_units)
    q_max = turbine.q_max if has_band else 0.0
    setpoint = turbine.setpoint if has_band else 0.0
    inflow = scenario.total_inflow()
    spill_cap = reservoir.spill_max * hours
    tol = 1e-9 * max(1.0, abs(W) + inflow)

    h_u = np.arange(hours + 1)[:, None]
    h_p = np.arange(hours + 1)[None, :]
    head = cum[h_u]
    tail = total - cum[hours - h_p]
    admissible = (h_u + h_p) <= hours

    out = {}
    for fixing in fixings:
        q = fixing[0] if fixing else 0
        if q and not has_band:
            continue
        u = u_max - q * setpoint
        value = u * head - p_max * tail + q * (setpoint * total + q_max * scenario.reserve_price * hours)
        release = h_u * k_u * u - h_p * k_p * p_max + q * k_u * setpoint * hours
        spill = W + inflow - release
        feasible = admissible & (spill >= -tol) & (spill <= spill_cap + tol)
        if not feasible.any():
            out[fixing] = (-np.inf, {})
            continue
        masked = np.where(feasible, value, -np.inf)
        i, j = np.unravel_index(int(np.argmax(masked)), masked.shape)
        out[fixing] = (float(masked[i, j]), {
            'h_u': float(i), 'h_p': float(j), 'u': float(u), 'q': float(q),
            's': float(min(max(spill[i, j], 0.0), spill_cap)),
        })
    return out


def method2_stage_value(stage: StageInput) -> StageResult:
    """Best generating/pumping hours on the week's price duration curve.

    Raises:
        InfeasibleStageError: If no (h_u, h_p, q, s) reaches W
    """
    agg = aggregate_plant(stage.plant)
    fixings = reserve_fixings(agg, stage.reserves_enabled, stage.q_fixed)
    results = [method2_fixing_values(stage.plant, stage.W, scenario, fixings)
               for scenario in stage.scenarios]
    return _combine(results, fixings, stage, method=2, extract=None)


# ---------------------------------------------------------------- methods 3 and 4

class HourlyModel:
    """Constraint template of the hourly intrastage LP over a node structure.

    A chain of hours gives the deterministic problem; the nodes of a scenario
    tree give its deterministic equivalent. Only the objective and the
    right-hand sides change between evaluations.
    """

    def __init__(self, plant: PlantTopology, node_hour: np.ndarray, node_parent: np.ndarray,
                 scenario_nodes: np.ndarray):
        self.plant = plant
        self.seasonal = seasonal_reservoir(plant)
        self.units = plant.units
        self.daily = plant.daily
        self.reserve_units = plant.reserve_units
        self.node_hour = np.asarray(node_hour)
        self.node_parent = np.asarray(node_parent)
        self.scenario_nodes = np.asarray(scenario_nodes)
        self.hours = self.scenario_nodes.shape[1]

        N, nU, nD = len(self.node_hour), len(self.units), len(self.daily)
        S, nQ = self.scenario_nodes.shape[0], len(self.reserve_units)
        self.n_nodes, self.n_scenarios = N, S
        self.base_u = 0
        self.base_v = N * nU
        self.base_s = self.base_v + N * nD
        self.base_m = self.base_s + N * nD
        self.base_S = self.base_m + N
        self.base_q = self.base_S + S
        self.n_vars = self.base_q + nQ
        self.q_idx = list(range(self.base_q, self.n_vars))

        nodes = np.arange(N)
        rows, cols, vals = [], [], []

        def add(r, c, v):
            r, c = np.broadcast_arrays(np.asarray(r), np.asarray(c))
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append(np.broadcast_to(np.asarray(v, dtype=float), r.shape).ravel())

        has_parent = self.node_parent >= 0
        for r_idx, reservoir in enumerate(self.daily):
            row = nodes * nD + r_idx
            add(row, self.v(nodes, r_idx), 1.0)
            add(row[has_parent], self.v(self.node_parent[has_parent], r_idx), -1.0)
            add(row, self.s(nodes, r_idx), 1.0)
            for j, unit in enumerate(self.units):
                coef = (unit.k if unit.from_reservoir == reservoir.id else 0.0) \
                    - (unit.k if unit.to_reservoir == reservoir.id else 0.0)
                if coef:
                    add(row, self.u(nodes, j), coef)

        fin = N * nD + nodes
        add(fin, self.m(nodes), 1.0)
        for j, unit in enumerate(self.units):
            add(fin, self.u(nodes, j), -1.0 if unit.kind == 'turbine' else 1.0)

        coupling = N * nD + N + np.arange(S)
        for j, unit in enumerate(self.units):
            coef = (unit.k if unit.from_reservoir == self.seasonal.id else 0.0) \
                - (unit.k if unit.to_reservoir == self.seasonal.id else 0.0)
            if coef:
                add(np.repeat(coupling, self.hours), self.u(self.scenario_nodes.ravel(), j), coef)
        add(coupling, self.base_S + np.arange(S), 1.0)

        self.n_eq = N * nD + N + S
        self.A_eq = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_eq, self.n_vars),
        )

        rows, cols, vals = [], [], []
        b_ub = []
        unit_pos = {u.id: j for j, u in enumerate(self.units)}
        for i, unit in enumerate(self.reserve_units):
            j = unit_pos[unit.id]
            low = 2 * i * N + nodes
            high = low + N
            add(low, self.u(nodes, j), -1.0)
            add(low, self.base_q + i, unit.setpoint)
            add(high, self.u(nodes, j), 1.0)
            add(high, self.base_q + i, unit.q_max)
            b_ub.append(np.concatenate([np.zeros(N), np.full(N, unit.p_max)]))
        if nQ:
            self.A_ub = sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(2 * nQ * N, self.n_vars),
            )
            self.b_ub = np.concatenate(b_ub)
        else:
            self.A_ub, self.b_ub = None, None

        lb = np.zeros(self.n_vars)
        ub = np.full(self.n_vars, np.inf)
        for j, unit in enumerate(self.units):
            ub[self.u(nodes, j)] = unit.p_max
        last = self.node_hour == self.hours - 1
        for r_idx, reservoir in enumerate(self.daily):
            ub[self.v(nodes, r_idx)] = np.where(last, 0.0, reservoir.v_max)
            ub[self.s(nodes, r_idx)] = reservoir.spill_max
        lb[self.m(nodes)] = -np.inf
        ub[self.base_S:self.base_q] = self.seasonal.spill_max * self.hours
        ub[self.base_q:] = 1.0
        self.lb, self.ub = lb, ub
        self.names = self._names()

    def u(self, n, j):
        return self.base_u + np.asarray(n) * len(self.units) + j

    def v(self, n, r):
        return self.base_v + np.asarray(n) * len(self.daily) + r

    def s(self, n, r):
        return self.base_s + np.asarray(n) * len(self.daily) + r

    def m(self, n):
        return self.base_m + np.asarray(n)

    def _names(self) -> List[str]:
        names = [''] * self.n_vars
        for n in range(self.n_nodes):
            h = int(self.node_hour[n]) + 1
            for j, unit in enumerate(self.units):
                names[int(self.u(n, j))] = f'power_{unit.id}_n{n}_h{h}'
            for r, reservoir in enumerate(self.daily):
                names[int(self.v(n, r))] = f'v_{reservoir.id}_n{n}_h{h}'
                names[int(self.s(n, r))] = f's_{reservoir.id}_n{n}_h{h}'
            names[int(self.m(n))] = f'm_n{n}_h{h}'
        for s in range(self.n_scenarios):
            names[self.base_S + s] = f'spill_{self.seasonal.id}_sc{s}'
        for i, unit in enumerate(self.reserve_units):
            names[self.base_q + i] = f'q_{unit.id}'
        return names

    def program(self, W: float, node_price: np.ndarray, node_probability: np.ndarray,
                inflows: Dict[str, np.ndarray], reserve_price: float,
                reserves_enabled: bool) -> LinearProgram:
        nodes = np.arange(self.n_nodes)
        c = np.zeros(self.n_vars)
        c[self.m(nodes)] = node_probability * node_price
        for i, unit in enumerate(self.reserve_units):
            c[self.base_q + i] = reserve_price * unit.q_max * self.hours

        b_eq = np.zeros(self.n_eq)
        nD = len(self.daily)
        for r_idx, reservoir in enumerate(self.daily):
            series = inflows.get(reservoir.id)
            if series is not None:
                b_eq[nodes * nD + r_idx] = np.asarray(series)[self.node_hour]
        seasonal_inflow = inflows.get(self.seasonal.id)
        total = float(np.sum(seasonal_inflow)) if seasonal_inflow is not None else 0.0
        b_eq[self.n_nodes * nD + self.n_nodes:] = W + total

        ub = self.ub
        if not reserves_enabled and self.q_idx:
            ub = ub.copy()
            ub[self.q_idx] = 0.0
        return LinearProgram(c, self.A_eq, b_eq, self.A_ub, self.b_ub, self.lb, ub, names=self.names)

    def schedule(self, x: np.ndarray, node_probability: np.ndarray) -> Schedule:
        N, nU, nD = self.n_nodes, len(self.units), len(self.daily)
        return Schedule(
            node_hour=self.node_hour.copy(),
            node_probability=np.asarray(node_probability, dtype=float).copy(),
            unit_ids=tuple(u.id for u in self.units),
            reservoir_ids=tuple(r.id for r in self.daily),
            power=x[self.base_u:self.base_v].reshape(N, nU),
            v_small=x[self.base_v:self.base_s].reshape(N, nD),
            spill=x[self.base_s:self.base_m].reshape(N, nD),
            market=x[self.base_m:self.base_S].copy(),
            seasonal_spill=x[self.base_S:self.base_q].copy(),
            scenario_nodes=self.scenario_nodes,
            turbine_mask=np.array([u.kind == 'turbine' for u in self.units], dtype=bool),
        )


_MODEL_CACHE: Dict[Tuple, HourlyModel] = {}
_MODEL_CACHE_SIZE = 16


def _cached_model(key: Tuple, build) -> HourlyModel:
    model = _MODEL_CACHE.get(key)
    if model is None:
        if len(_MODEL_CACHE) >= _MODEL_CACHE_SIZE:
            _MODEL_CACHE.pop(next(iter(_MODEL_CACHE)))
        model = _MODEL_CACHE[key] = build()
    return model


def chain_model(plant: PlantTopology, hours: int) -> HourlyModel:
    return _cached_model(
        (plant, 'chain', hours),
        lambda: HourlyModel(plant, np.arange(hours), np.arange(hours) - 1, np.arange(hours)[None, :]),
    )


def tree_model(plant: PlantTopology, tree: ScenarioTree) -> HourlyModel:
    return _cached_model(
        (plant, 'tree', tree.structure_key),
        lambda: HourlyModel(plant, tree.node_hour, tree.node_parent, tree.scenario_nodes),
    )


def method3_program(plant: PlantTopology, W: float, scenario: WeeklyScenario,
                    reserves_enabled: bool) -> Tuple[HourlyModel, LinearProgram]:
    model = chain_model(plant, scenario.hours)
    lp = model.program(W, scenario.prices, np.ones(scenario.hours), scenario.inflows,
                       scenario.reserve_price, reserves_enabled)
    return model, lp


def method4_program(plant: PlantTopology, W: float, tree: ScenarioTree,
                    reserves_enabled: bool) -> Tuple[HourlyModel, LinearProgram]:
    model = tree_model(plant, tree)
    lp = model.program(W, tree.node_price, tree.node_probability, tree.inflows,
                       tree.reserve_price, reserves_enabled)
    return model, lp


def method3_fixing_values(plant: PlantTopology, W: float, scenario: WeeklyScenario,
                          fixings: List[Fixing]) -> Dict[Fixing, float]:
    model, lp = method3_program(plant, W, scenario, True)
    return {q: sol.objective_value for q, sol in _values_by_fixing(lp, model.q_idx, fixings).items()}


def method4_fixing_values(plant: PlantTopology, W: float, tree: ScenarioTree,
                          fixings: List[Fixing]) -> Dict[Fixing, float]:
    model, lp = method4_program(plant, W, tree, True)
    return {q: sol.objective_value for q, sol in _values_by_fixing(lp, model.q_idx, fixings).items()}


def method3_intrastage(stage: StageInput) -> StageResult:
    """Hourly LP with the week's prices and inflows known in advance.

    With several scenarios the reserve fixing is chosen here-and-now for the
    whole set (unless `shared_reserve` is off) and the reported value is the
    scenario average.

    Raises:
        InfeasibleStageError: If W cannot be deployed in some scenario
    """
    scenarios = stage.scenarios
    if len(scenarios) == 1 and stage.q_fixed is None:
        model, lp = method3_program(stage.plant, stage.W, scenarios[0], stage.reserves_enabled)
        sol = solve_with_binaries(lp, model.q_idx)
        if not sol.optimal:
            raise InfeasibleStageError(f"method 3: W = {stage.W:.6g} m3 is infeasible")
        q = tuple(int(round(v)) for v in sol.x[model.q_idx])
        return StageResult(sol.objective_value, q, model.schedule(sol.x, np.ones(model.n_nodes)))

    fixings = reserve_fixings(stage.plant, stage.reserves_enabled, stage.q_fixed)
    results = []
    for scenario in scenarios:
        model, lp = method3_program(stage.plant, stage.W, scenario, stage.reserves_enabled)
        results.append(_values_by_fixing(lp, model.q_idx, fixings))
    result = _combine(results, fixings, stage, method=3, extract=None)
    if len(scenarios) == 1:
        sol = results[0][result.q]
        model = chain_model(stage.plant, scenarios[0].hours)
        result.schedule = model.schedule(sol.x, np.ones(model.n_nodes))
    return result


def method4_intrastage(stage: StageInput) -> StageResult:
    """Deterministic equivalent over the bundles of a daily price tree.

    Raises:
        InfeasibleStageError: If W cannot be met on some scenario path
    """
    tree = stage.scenario
    if not isinstance(tree, ScenarioTree):
        raise ValidationError("method 4 needs a ScenarioTree")
    model, lp = method4_program(stage.plant, stage.W, tree, stage.reserves_enabled)
    if stage.q_fixed is not None:
        fixing = reserve_fixings(stage.plant, stage.reserves_enabled, stage.q_fixed)[0]
        sol = solve_lp(_fixed(lp, model.q_idx, fixing))
    else:
        sol = solve_with_binaries(lp, model.q_idx)
    if not sol.optimal:
        raise InfeasibleStageError(f"method 4: W = {stage.W:.6g} m3 is infeasible on some scenario path")
    q = tuple(int(round(v)) for v in sol.x[model.q_idx])
    logger.debug(f"Method 4 LP with {lp.n_vars} variables solved, value {sol.objective_value:.6g}")
    return StageResult(sol.objective_value, q, model.schedule(sol.x, tree.node_probability))


# ---------------------------------------------------------------- combination

def _value_of(entry) -> float:
    if isinstance(entry, Solution):
        return entry.objective_value if entry.optimal else -np.inf
    if isinstance(entry, tuple):
        return entry[0]
    return float(entry)


def _expectation(values: np.ndarray, weights: np.ndarray) -> float:
    if not np.isfinite(values).all():
        return -np.inf
    return float(weights @ values)


def _combine(results: List[Dict[Fixing, object]], fixings: List[Fixing], stage: StageInput,
             method: int, extract) -> StageResult:
    """Average per-scenario values under a shared or per-scenario reserve choice."""
    table = {q: np.array([_value_of(r[q]) if q in r else -np.inf for r in results]) for q in fixings}
    weights = np.array([s.probability for s in stage.scenarios], dtype=float)
    weights = weights / weights.sum()
    if stage.shared_reserve or len(results) == 1:
        q, value = best_fixing({q: _expectation(v, weights) for q, v in table.items()})
        if not np.isfinite(value):
            raise InfeasibleStageError(f"method {method}: W = {stage.W:.6g} m3 is infeasible")
        details = {}
        if len(results) == 1:
            entry = results[0][q]
            if extract is not None and isinstance(entry, Solution):
                details = extract(entry)
            elif isinstance(entry, tuple):
                details = entry[1]
        return StageResult(value, q, None, details)

    per_scenario = [best_fixing({q: float(table[q][s]) for q in fixings}) for s in range(len(results))]
    value = _expectation(np.array([v for _, v in per_scenario]), weights)
    if not np.isfinite(value):
        raise InfeasibleStageError(f"method {method}: W = {stage.W:.6g} m3 is infeasible")
    return StageResult(value, per_scenario[0][0], None,
                       {f'q_scenario_{s}': float(sum(q)) for s, (q, _) in enumerate(per_scenario)})


def stage_value(method: int, stage: StageInput) -> StageResult:
    """Dispatch to the evaluator of `method`."""
    evaluators = {1: method1_stage_value, 2: method2_stage_value,
                  3: method3_intrastage, 4: method4_intrastage}
    if method not in evaluators:
        raise ValidationError(f"unknown method {method}")
    return evaluators[method](stage)


def fixing_values(method: int, plant: PlantTopology, W: float,
                  scenario: Union[WeeklyScenario, ScenarioTree], fixings: List[Fixing],
                  peak_hours: Optional[PeakMask] = None, hours_per_day: int = 24) -> Dict[Fixing, float]:
    """Stage value of one scenario (or tree) for every fixing; -inf if infeasible."""
    if method == 1:
        values = method1_fixing_values(plant, W, scenario, fixings, peak_hours, hours_per_day)
    elif method == 2:
        values = {q: v for q, (v, _) in method2_fixing_values(plant, W, scenario, fixings).items()}
    elif method == 3:
        values = method3_fixing_values(plant, W, scenario, fixings)
    elif method == 4:
        values = method4_fixing_values(plant, W, scenario, fixings)
    else:
        raise ValidationError(f"unknown method {method}")
    return {q: values.get(q, -np.inf) for q in fixings}


def dump_stage_lp(method: int, stage: StageInput, path: Union[str, Path]) -> Path:
    """Write the LP of a method 1, 3 or 4 stage problem in CPLEX LP format."""
    if method == 1:
        scenario = stage.scenarios[0]
        lp, q_idx = _method1_program(stage.plant, stage.W, scenario, stage.reserves_enabled,
                                     stage.peak_hours, stage.hours_per_day)
    elif method == 3:
        model, lp = method3_program(stage.plant, stage.W, stage.scenarios[0], stage.reserves_enabled)
        q_idx = model.q_idx
    elif method == 4:
        model, lp = method4_program(stage.plant, stage.W, stage.scenario, stage.reserves_enabled)
        q_idx = model.q_idx
    else:
        raise ValidationError(f"method {method} is not solved as an LP")
    return write_lp(lp, path, q_idx, title=f'method {method} stage problem, W = {stage.W:.6g}')
