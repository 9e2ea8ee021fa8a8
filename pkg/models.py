from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

HOURS_PER_WEEK = 168


class FrozenModel(BaseModel):
    """Immutable base model; validated values are shared read-only."""
    model_config = ConfigDict(frozen=True, extra='forbid')


class Reservoir(FrozenModel):
    """A seasonal or daily reservoir."""
    id: str = Field(..., min_length=1)
    kind: Literal['seasonal', 'daily']
    v_max: float = Field(..., gt=0)
    v_init: float = Field(0.0, ge=0)
    spill_max: float = Field(0.0, ge=0)

    @model_validator(mode='after')
    def validate_initial_volume(self):
        if self.v_init > self.v_max:
            raise ValueError(f"reservoir {self.id}: v_init {self.v_init} exceeds v_max {self.v_max}")
        return self


class Unit(FrozenModel):
    """A turbine or pump with a linear water-energy conversion.

    Turbines move water from `from_reservoir` to `to_reservoir` (None is the
    tailwater). Pumps lift water from `from_reservoir` (None is an infinite
    lower basin) into `to_reservoir`.
    """
    id: str = Field(..., min_length=1)
    kind: Literal['turbine', 'pump']
    from_reservoir: Optional[str] = None
    to_reservoir: Optional[str] = None
    p_max: float = Field(..., gt=0)
    k: float = Field(..., gt=0)
    reserve_qualified: bool = False
    q_min: float = Field(0.0, ge=0)
    q_max: float = Field(0.0, ge=0)

    @model_validator(mode='after')
    def validate_unit(self):
        if self.q_min + 2 * self.q_max > self.p_max + 1e-9:
            raise ValueError(
                f"unit {self.id}: band does not fit (q_min + 2*q_max = "
                f"{self.q_min + 2 * self.q_max} > p_max = {self.p_max})"
            )
        if self.kind == 'pump' and self.reserve_qualified:
            raise ValueError(f"unit {self.id}: pumps cannot be reserve qualified")
        if self.kind == 'turbine' and self.from_reservoir is None:
            raise ValueError(f"unit {self.id}: turbine needs a source reservoir")
        if self.kind == 'pump' and self.to_reservoir is None:
            raise ValueError(f"unit {self.id}: pump needs a target reservoir")
        return self

    @property
    def setpoint(self) -> float:
        """Generation set point of a committed reserve band."""
        return self.q_min + self.q_max


class PlantTopology(FrozenModel):
    """Reservoirs, units and the inflow points of a hydro plant."""
    reservoirs: Tuple[Reservoir, ...] = Field(..., min_length=1)
    units: Tuple[Unit, ...] = ()
    inflow_points: Tuple[str, ...] = ()

    @model_validator(mode='after')
    def validate_topology(self):
        ids = [r.id for r in self.reservoirs]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate reservoir ids in {ids}")
        unit_ids = [u.id for u in self.units]
        if len(set(unit_ids)) != len(unit_ids):
            raise ValueError(f"duplicate unit ids in {unit_ids}")
        if not any(r.kind == 'seasonal' for r in self.reservoirs):
            raise ValueError("plant needs at least one seasonal reservoir")

        known = set(ids)
        for unit in self.units:
            for end in (unit.from_reservoir, unit.to_reservoir):
                if end is not None and end not in known:
                    raise ValueError(f"unit {unit.id}: unknown reservoir {end}")
            if unit.from_reservoir is not None and unit.from_reservoir == unit.to_reservoir:
                raise ValueError(f"unit {unit.id}: source and sink are both {unit.from_reservoir}")
        for point in self.inflow_points:
            if point not in known:
                raise ValueError(f"inflow point {point}: unknown reservoir")

        # turbine routing must be acyclic (pumps run against it by definition)
        edges: Dict[str, List[str]] = {rid: [] for rid in ids}
        for unit in self.turbines:
            if unit.to_reservoir is not None:
                edges[unit.from_reservoir].append(unit.to_reservoir)
        state: Dict[str, int] = {}

        def visit(node: str) -> None:
            state[node] = 1
            for nxt in edges[node]:
                if state.get(nxt) == 1:
                    raise ValueError(f"routing cycle through reservoir {nxt}")
                if nxt not in state:
                    visit(nxt)
            state[node] = 2

        for rid in ids:
            if rid not in state:
                visit(rid)
        return self

    @property
    def turbines(self) -> Tuple[Unit, ...]:
        return tuple(u for u in self.units if u.kind == 'turbine')

    @property
    def pumps(self) -> Tuple[Unit, ...]:
        return tuple(u for u in self.units if u.kind == 'pump')

    @property
    def seasonal(self) -> Tuple[Reservoir, ...]:
        return tuple(r for r in self.reservoirs if r.kind == 'seasonal')

    @property
    def daily(self) -> Tuple[Reservoir, ...]:
        return tuple(r for r in self.reservoirs if r.kind == 'daily')

    @property
    def routing(self) -> Dict[str, Tuple[Optional[str], Optional[str]]]:
        """Map unit id -> (source, sink); None is tailwater / lower basin."""
        return {u.id: (u.from_reservoir, u.to_reservoir) for u in self.units}

    @property
    def reserve_units(self) -> Tuple[Unit, ...]:
        """Turbines whose reserve commitment is a decision (q_max > 0)."""
        return tuple(u for u in self.turbines if u.reserve_qualified and u.q_max > 0)

    def reservoir(self, reservoir_id: str) -> Reservoir:
        for r in self.reservoirs:
            if r.id == reservoir_id:
                return r
        raise KeyError(reservoir_id)


class StochasticParams(FrozenModel):
    """Weekly price/inflow process parameters.

    Per-week fields accept a scalar, which is broadcast over all weeks.
    `reserve_price` is the capacity remuneration in EUR/MW per hour of the
    tendered week.
    """
    weekly_price_mean: Tuple[float, ...] = Field(..., min_length=1)
    hourly_profile: Tuple[float, ...] = Field(..., min_length=2)
    price_sigma: Tuple[float, ...]
    inflow_mean: Dict[str, Tuple[float, ...]] = Field(default_factory=dict)
    inflow_sigma: float = Field(0.0, ge=0)
    rho: float = Field(0.0, ge=-1, le=1)
    reserve_price: Tuple[float, ...]
    daily_price_sigma: float = Field(0.1, ge=0)
    hours_per_day: int = Field(24, ge=1)
    peak_hours: Optional[Tuple[int, ...]] = None

    @model_validator(mode='before')
    @classmethod
    def broadcast_weekly(cls, data):
        if not isinstance(data, dict) or 'weekly_price_mean' not in data:
            return data
        weeks = len(data['weekly_price_mean'])
        data = dict(data)
        for key in ('price_sigma', 'reserve_price'):
            if isinstance(data.get(key), (int, float)):
                data[key] = [float(data[key])] * weeks
        if isinstance(data.get('inflow_mean'), dict):
            data['inflow_mean'] = {
                rid: [float(v)] * weeks if isinstance(v, (int, float)) else v
                for rid, v in data['inflow_mean'].items()
            }
        return data

    @field_validator('price_sigma')
    @classmethod
    def validate_sigma(cls, v):
        if any(s < 0 for s in v):
            raise ValueError("price_sigma must be non-negative")
        return v

    @field_validator('hourly_profile')
    @classmethod
    def validate_profile(cls, v):
        if any(f < 0 for f in v):
            raise ValueError("hourly_profile factors must be non-negative")
        if abs(float(np.mean(v)) - 1.0) > 1e-9:
            raise ValueError(f"hourly_profile must average to 1 (got {np.mean(v)})")
        return v

    @model_validator(mode='after')
    def validate_lengths(self):
        weeks = self.weeks
        if len(self.price_sigma) != weeks or len(self.reserve_price) != weeks:
            raise ValueError(f"price_sigma and reserve_price need {weeks} weekly values")
        for rid, series in self.inflow_mean.items():
            if len(series) != weeks:
                raise ValueError(f"inflow_mean[{rid}] needs {weeks} weekly values")
            if any(a < 0 for a in series):
                raise ValueError(f"inflow_mean[{rid}] must be non-negative")
        if any(p < 0 for p in self.weekly_price_mean) or any(c < 0 for c in self.reserve_price):
            raise ValueError("prices must be non-negative")
        if self.hours % self.hours_per_day:
            raise ValueError(f"{self.hours} hours is not a whole number of {self.hours_per_day}-hour days")
        if self.peak_hours is not None:
            mask = set(self.peak_hours)
            if not mask or len(mask) >= self.hours or min(mask) < 0 or max(mask) >= self.hours:
                raise ValueError("peak_hours must be a non-empty proper subset of the week's hours")
        return self

    @property
    def weeks(self) -> int:
        return len(self.weekly_price_mean)

    @property
    def hours(self) -> int:
        return len(self.hourly_profile)

    @property
    def days(self) -> int:
        return self.hours // self.hours_per_day

    def truncated(self, weeks: int) -> 'StochasticParams':
        """Return the parameters of the first `weeks` weeks."""
        if not 1 <= weeks <= self.weeks:
            raise ValueError(f"cannot truncate {self.weeks} weeks to {weeks}")
        data = self.model_dump()
        for key in ('weekly_price_mean', 'price_sigma', 'reserve_price'):
            data[key] = data[key][:weeks]
        data['inflow_mean'] = {rid: v[:weeks] for rid, v in data['inflow_mean'].items()}
        return StochasticParams.model_validate(data)

    def scaled_prices(self, factor: float) -> 'StochasticParams':
        """Return the parameters with every price multiplied by `factor`."""
        data = self.model_dump()
        data['weekly_price_mean'] = [p * factor for p in data['weekly_price_mean']]
        data['reserve_price'] = [c * factor for c in data['reserve_price']]
        return StochasticParams.model_validate(data)


class GridSettings(FrozenModel):
    """Discretisation of the master problem."""
    n_filling: int = Field(21, ge=2)
    n_discharge: int = Field(21, ge=2)
    terminal_water_value: Optional[float] = Field(None, ge=0)


class SimConfig(FrozenModel):
    """Monte Carlo operation simulation settings."""
    n_samples: int = Field(100, ge=1)
    seed: int = 0
    reserves_enabled: bool = True
    pump_threshold_margin: float = Field(0.0, ge=0)
    gen_threshold_margin: float = Field(0.0, ge=0)
    log_schedules: bool = False
    workers: int = Field(1, ge=1)


class OutputSettings(FrozenModel):
    directory: str = 'results'
    dump_lp: bool = False


class RunConfig(FrozenModel):
    """Complete configuration of an optimize / simulate / compare run."""
    plant: Optional[PlantTopology] = None
    stochastic: Optional[StochasticParams] = None
    grids: GridSettings = GridSettings()
    methods: Tuple[int, ...] = (1, 2, 3, 4)
    reserves: Literal['on', 'off', 'both'] = 'both'
    n_scenarios: int = Field(10, ge=1)
    branching: int = Field(2, ge=1)
    horizon_weeks: Optional[int] = Field(None, ge=1)
    shared_reserve_decision: bool = True
    workers: int = Field(1, ge=1)
    seed: int = 0
    simulation: SimConfig = SimConfig()
    output: OutputSettings = OutputSettings()

    @field_validator('methods')
    @classmethod
    def validate_methods(cls, v):
        if not v:
            raise ValueError("at least one method must be selected")
        if any(m not in (1, 2, 3, 4) for m in v):
            raise ValueError(f"methods must be a subset of {{1, 2, 3, 4}}, got {v}")
        return tuple(sorted(set(v)))

    @property
    def reserve_flags(self) -> Tuple[bool, ...]:
        return {'on': (True,), 'off': (False,), 'both': (False, True)}[self.reserves]
