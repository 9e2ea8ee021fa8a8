"""Weekly price/inflow scenarios, daily-branching price trees and price
duration curves."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import norm

from exceptions import ResourceLimitError, ValidationError
from models import StochasticParams

logger = logging.getLogger(__name__)

MAX_TREE_SCENARIOS = 200_000

PeakMask = Union[np.ndarray, Sequence[int], Sequence[bool]]


@dataclass(frozen=True)
class WeeklyScenario:
    """One realisation of a week: hourly prices, hourly inflows per reservoir."""
    prices: np.ndarray
    inflows: Dict[str, np.ndarray]
    reserve_price: float
    probability: float = 1.0
    week: int = 1

    @property
    def hours(self) -> int:
        return len(self.prices)

    def inflow(self, reservoir_id: str) -> np.ndarray:
        """Hourly inflow series of a reservoir (zeros when it gets none)."""
        series = self.inflows.get(reservoir_id)
        return np.zeros(self.hours) if series is None else series

    def total_inflow(self) -> float:
        return float(sum(series.sum() for series in self.inflows.values()))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({
            'hour': np.arange(1, self.hours + 1),
            'price': self.prices,
            'inflow': sum((s for s in self.inflows.values()), np.zeros(self.hours)),
        })
        for rid, series in sorted(self.inflows.items()):
            frame[f'inflow_{rid}'] = series
        return frame


def _check_week(params: StochasticParams, week: int) -> int:
    if not 1 <= week <= params.weeks:
        raise ValidationError(f"week {week} outside 1..{params.weeks}")
    return week - 1


def _lognormal_factor(sigma: float, shock: float) -> float:
    # mean-one lognormal multiplier
    return float(np.exp(sigma * shock - 0.5 * sigma ** 2))


def weekly_shocks(params: StochasticParams, stream: np.random.Generator) -> Tuple[float, float]:
    """Draw the correlated standard-normal (price, inflow) shock pair."""
    z = stream.standard_normal(2)
    rho = params.rho
    return float(z[0]), float(rho * z[0] + np.sqrt(1.0 - rho ** 2) * z[1])


def _build_week(params: StochasticParams, week: int, price_factor: float,
                inflow_factor: float) -> WeeklyScenario:
    t = _check_week(params, week)
    profile = np.asarray(params.hourly_profile, dtype=float)
    prices = np.maximum(params.weekly_price_mean[t] * price_factor * profile, 0.0)
    hours = params.hours
    inflows = {
        rid: np.full(hours, max(series[t] * inflow_factor, 0.0) / hours)
        for rid, series in params.inflow_mean.items()
    }
    return WeeklyScenario(prices=prices, inflows=inflows,
                          reserve_price=float(params.reserve_price[t]), week=week)


def sample_week(params: StochasticParams, week: int, stream: np.random.Generator) -> WeeklyScenario:
    """Sample one week with correlated lognormal price and inflow levels.

    Two normals are always consumed from the stream, so degenerate (zero
    volatility) parameters keep the stream aligned with volatile ones.
    """
    t = _check_week(params, week)
    e_price, e_inflow = weekly_shocks(params, stream)
    return _build_week(
        params, week,
        _lognormal_factor(params.price_sigma[t], e_price),
        _lognormal_factor(params.inflow_sigma, e_inflow),
    )


def expected_week(params: StochasticParams, week: int) -> WeeklyScenario:
    """Point forecast of a week: mean price level and mean inflows."""
    return _build_week(params, week, 1.0, 1.0)


def default_peak_mask(hours: int = 168, hours_per_day: int = 24) -> np.ndarray:
    """Peak hours 08:00-20:00 on the first five days of the week."""
    hour = np.arange(hours)
    day, clock = hour // hours_per_day, (hour % hours_per_day) * 24.0 / hours_per_day
    mask = (day < 5) & (clock >= 8) & (clock < 20)
    if not mask.any() or mask.all():
        raise ValidationError(f"no proper default peak mask for {hours} hours of {hours_per_day}-hour days")
    return mask


def peak_mask_from(params_mask: Optional[PeakMask], hours: int, hours_per_day: int = 24) -> np.ndarray:
    """Normalise an hour-index list or boolean mask into a boolean array."""
    if params_mask is None:
        return default_peak_mask(hours, hours_per_day)
    mask = np.asarray(params_mask)
    if mask.dtype != bool:
        indices = mask.astype(int)
        mask = np.zeros(hours, dtype=bool)
        mask[indices] = True
    if mask.shape != (hours,):
        raise ValidationError(f"peak mask has shape {mask.shape}, expected ({hours},)")
    return mask


def aggregate_peak_offpeak(scenario: WeeklyScenario, peak_hours: Optional[PeakMask] = None,
                           hours_per_day: int = 24) -> Tuple[float, float]:
    """Mean prices over the peak hours and over the remaining hours."""
    mask = peak_mask_from(peak_hours, scenario.hours, hours_per_day)
    if not mask.any() or mask.all():
        raise ValidationError("peak mask must be non-empty and not cover the whole week")
    return float(scenario.prices[mask].mean()), float(scenario.prices[~mask].mean())


@dataclass(frozen=True)
class PriceDurationCurve:
    """Non-increasing price duration curve over the hours of a week.

    Hour i of the duration axis carries the i-th highest price; the curve is
    the piecewise-linear function through the breakpoints, with vertical
    segments at whole hours.
    """
    levels: np.ndarray

    @property
    def hours(self) -> int:
        return len(self.levels)

    @property
    def cumulative(self) -> np.ndarray:
        return np.concatenate(([0.0], np.cumsum(self.levels)))

    @property
    def breakpoints(self) -> Tuple[np.ndarray, np.ndarray]:
        edges = np.arange(self.hours + 1, dtype=float)
        x = np.repeat(edges, 2)[1:-1]
        y = np.repeat(self.levels, 2)
        return x, y

    def value(self, x: float) -> float:
        if not 0 <= x <= self.hours:
            raise ValidationError(f"duration {x} outside [0, {self.hours}]")
        return float(self.levels[min(int(np.floor(x)), self.hours - 1)])

    def primitive(self, x: float) -> float:
        i = min(int(np.floor(x)), self.hours - 1)
        return float(self.cumulative[i] + (x - i) * self.levels[i])


def make_pdc(scenario: Union[WeeklyScenario, np.ndarray]) -> PriceDurationCurve:
    prices = scenario.prices if isinstance(scenario, WeeklyScenario) else np.asarray(scenario, dtype=float)
    return PriceDurationCurve(levels=np.sort(prices)[::-1].copy())


def pdc_integral(pdc: PriceDurationCurve, a: float, b: float) -> float:
    """Exact integral of the curve over [a, b] (EUR per MW)."""
    if not 0 <= a <= b <= pdc.hours:
        raise ValidationError(f"integration bounds [{a}, {b}] outside [0, {pdc.hours}]")
    return pdc.primitive(b) - pdc.primitive(a)


@dataclass
class ScenarioTree:
    """Daily-branching price tree for one week.

    `day_labels[d, s]` is the bundle of scenario s on day d; scenarios in
    one bundle share every price up to the end of that day. Bundles of day
    d+1 refine the bundles of day d. Node ids enumerate (hour, bundle)
    pairs hour by hour, so `n_nodes` equals the sum over hours of the
    number of bundles.
    """
    scenario_prices: np.ndarray
    probabilities: np.ndarray
    day_labels: np.ndarray
    hours_per_day: int
    inflows: Dict[str, np.ndarray]
    reserve_price: float
    week: int = 1

    node_hour: np.ndarray = field(init=False, repr=False)
    node_parent: np.ndarray = field(init=False, repr=False)
    node_probability: np.ndarray = field(init=False, repr=False)
    node_price: np.ndarray = field(init=False, repr=False)
    scenario_nodes: np.ndarray = field(init=False, repr=False)
    hour_offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.scenario_prices = np.atleast_2d(np.asarray(self.scenario_prices, dtype=float))
        self.probabilities = np.asarray(self.probabilities, dtype=float)
        labels = np.atleast_2d(np.asarray(self.day_labels))
        n_scen, hours = self.scenario_prices.shape
        days = hours // self.hours_per_day

        if hours % self.hours_per_day or labels.shape != (days, n_scen):
            raise ValidationError(f"day labels of shape {labels.shape} do not match {days} days x {n_scen} scenarios")
        if self.probabilities.shape != (n_scen,) or (self.probabilities < 0).any():
            raise ValidationError("scenario probabilities must be non-negative, one per scenario")
        if abs(self.probabilities.sum() - 1.0) > 1e-9:
            raise ValidationError(f"scenario probabilities sum to {self.probabilities.sum()}, not 1")
        if (self.scenario_prices < 0).any():
            raise ValidationError("tree prices must be non-negative")

        # canonical labels: bundles numbered by first occurrence
        canon = np.empty_like(labels, dtype=int)
        for d in range(days):
            _, first, inverse = np.unique(labels[d], return_index=True, return_inverse=True)
            order = np.argsort(np.argsort(first))
            canon[d] = order[inverse]
        self.day_labels = canon

        for d in range(days):
            for b in range(canon[d].max() + 1):
                members = np.flatnonzero(canon[d] == b)
                if d > 0 and len(np.unique(canon[d - 1, members])) != 1:
                    raise ValidationError(f"bundle {b} of day {d + 1} does not refine day {d}")
                history = self.scenario_prices[members, :(d + 1) * self.hours_per_day]
                if not np.allclose(history, history[0], rtol=0, atol=1e-9):
                    raise ValidationError(f"scenarios of bundle {b} on day {d + 1} disagree on revealed prices")

        counts = np.array([canon[h // self.hours_per_day].max() + 1 for h in range(hours)])
        self.hour_offsets = np.concatenate(([0], np.cumsum(counts)))
        n_nodes = int(self.hour_offsets[-1])

        self.scenario_nodes = np.empty((n_scen, hours), dtype=np.int64)
        for h in range(hours):
            self.scenario_nodes[:, h] = self.hour_offsets[h] + canon[h // self.hours_per_day]

        self.node_hour = np.repeat(np.arange(hours), counts)
        self.node_parent = np.full(n_nodes, -1, dtype=np.int64)
        self.node_probability = np.zeros(n_nodes)
        self.node_price = np.zeros(n_nodes)
        for h in range(hours):
            nodes = self.scenario_nodes[:, h]
            np.add.at(self.node_probability, nodes, self.probabilities)
            self.node_price[nodes] = self.scenario_prices[:, h]
            if h > 0:
                self.node_parent[nodes] = self.scenario_nodes[:, h - 1]

    @classmethod
    def from_scenario(cls, scenario: WeeklyScenario, hours_per_day: int = 24) -> 'ScenarioTree':
        """Degenerate single-scenario tree."""
        days = scenario.hours // hours_per_day
        return cls(scenario_prices=scenario.prices[None, :], probabilities=np.ones(1),
                   day_labels=np.zeros((days, 1), dtype=int), hours_per_day=hours_per_day,
                   inflows=scenario.inflows, reserve_price=scenario.reserve_price, week=scenario.week)

    def path_scenario(self, s: int) -> WeeklyScenario:
        """The week as seen along scenario path s."""
        return WeeklyScenario(prices=self.scenario_prices[s], inflows=self.inflows,
                              reserve_price=self.reserve_price,
                              probability=float(self.probabilities[s]), week=self.week)

    @property
    def n_scenarios(self) -> int:
        return self.scenario_prices.shape[0]

    @property
    def hours(self) -> int:
        return self.scenario_prices.shape[1]

    @property
    def n_nodes(self) -> int:
        return int(self.hour_offsets[-1])

    @property
    def structure_key(self) -> Tuple:
        return (self.hours_per_day, self.scenario_prices.shape, self.day_labels.tobytes())

    def bundle_count(self, hour: int) -> int:
        return int(self.hour_offsets[hour + 1] - self.hour_offsets[hour])

    def bundles(self, hour: int) -> List[np.ndarray]:
        """Partition of the scenario set at a (0-based) hour."""
        nodes = self.scenario_nodes[:, hour] - self.hour_offsets[hour]
        return [np.flatnonzero(nodes == b) for b in range(self.bundle_count(hour))]

    def children(self, hour: int, bundle: int) -> List[int]:
        """Bundles of the next hour contained in `bundle` of this hour."""
        if hour + 1 >= self.hours:
            return []
        node = self.hour_offsets[hour] + bundle
        child_nodes = np.flatnonzero(self.node_parent == node)
        return sorted(int(n - self.hour_offsets[hour + 1]) for n in child_nodes)

    def bundle_prices(self, hour: int) -> np.ndarray:
        return self.node_price[self.hour_offsets[hour]:self.hour_offsets[hour + 1]]

    def bundle_probabilities(self, hour: int) -> np.ndarray:
        return self.node_probability[self.hour_offsets[hour]:self.hour_offsets[hour + 1]]

    def leaf_scenarios(self) -> List[WeeklyScenario]:
        return [
            WeeklyScenario(prices=self.scenario_prices[s].copy(), inflows=self.inflows,
                           reserve_price=self.reserve_price, probability=float(self.probabilities[s]),
                           week=self.week)
            for s in range(self.n_scenarios)
        ]


def build_price_tree(params: StochasticParams, week: int, branching: int,
                     stream: np.random.Generator) -> ScenarioTree:
    """Tree with `branching`**days equiprobable scenarios.

    The weekly level and the inflows come from one `sample_week` draw. At
    every day boundary each bundle splits into `branching` children whose
    price levels are the parent's level times mean-normalised lognormal
    factors at the midpoint quantiles of the standard normal.
    """
    if branching < 1:
        raise ValidationError(f"branching factor must be >= 1, got {branching}")
    days = params.days
    n_scen = branching ** days
    if n_scen > MAX_TREE_SCENARIOS:
        raise ResourceLimitError(f"tree with {branching}^{days} = {n_scen} scenarios exceeds {MAX_TREE_SCENARIOS}")

    base = sample_week(params, week, stream)
    z = norm.ppf((np.arange(branching) + 0.5) / branching)
    factors = np.exp(params.daily_price_sigma * z)
    factors /= factors.mean()

    scenarios = np.arange(n_scen)
    hpd = params.hours_per_day
    labels = np.empty((days, n_scen), dtype=np.int64)
    level = np.ones(n_scen)
    prices = np.empty((n_scen, params.hours))
    for d in range(days):
        stride = branching ** (days - 1 - d)
        labels[d] = scenarios // stride
        level = level * factors[labels[d] % branching]
        hours = slice(d * hpd, (d + 1) * hpd)
        prices[:, hours] = level[:, None] * base.prices[None, hours]

    logger.debug(f"Built price tree for week {week}: {n_scen} scenarios, branching {branching}")
    return ScenarioTree(scenario_prices=prices, probabilities=np.full(n_scen, 1.0 / n_scen),
                        day_labels=labels, hours_per_day=hpd, inflows=base.inflows,
                        reserve_price=base.reserve_price, week=week)


def reference_hourly_profile(hours_per_day: int = 24, days: int = 7) -> Tuple[float, ...]:
    """Synthetic weekly shape: a daytime hump, weaker on the last two days."""
    clock = np.arange(hours_per_day) * 24.0 / hours_per_day
    daily = 0.8 + 0.45 * np.exp(-0.5 * ((clock - 11.5) / 3.5) ** 2) + 0.2 * np.exp(-0.5 * ((clock - 19.0) / 1.5) ** 2)
    week = np.concatenate([daily * (0.85 if d >= 5 else 1.0) for d in range(days)])
    week /= week.mean()
    return tuple(float(f) for f in week)


def reference_params(weeks: int = 52) -> StochasticParams:
    """Synthetic price/inflow parameters for the reference plant.

    Winter prices are high, snowmelt inflows peak in early summer, and price
    and inflow shocks are mildly negatively correlated. No value here is
    taken from market data.
    """
    t = np.arange(weeks)
    price = 50.0 + 12.0 * np.cos(2 * np.pi * (t - 2) / 52)
    melt = 0.15e6 + 2.6e6 * np.exp(-0.5 * ((t - 26) / 6.0) ** 2)
    return StochasticParams(
        weekly_price_mean=tuple(price),
        hourly_profile=reference_hourly_profile(),
        price_sigma=(0.15,) * weeks,
        inflow_mean={'R1': tuple(melt), 'R2': tuple(0.1 * melt)},
        inflow_sigma=0.3,
        rho=-0.3,
        reserve_price=tuple(10.0 + 4.0 * np.cos(2 * np.pi * (t - 2) / 52)),
        daily_price_sigma=0.1,
    )
