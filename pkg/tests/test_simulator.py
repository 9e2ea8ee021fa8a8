import numpy as np
import pytest

from conftest import flat_params, single_reservoir_plant
from exceptions import ValidationError
from models import SimConfig, StochasticParams
from simulator import (SCORE_TOL, ReserveOfferPlanner, dispatch_heuristic, dispatch_thresholds,
                       profit_statistics, reserve_offer_decision, sample_stream, simulate_year)
from stochastic import WeeklyScenario, reference_params
from valuation import ValueFunction


def week(prices, inflows=None, reserve_price=0.0):
    return WeeklyScenario(prices=np.asarray(prices, dtype=float), inflows=inflows or {},
                          reserve_price=reserve_price)


def linear_value_function(weeks, v_max, slope, method=3, discharge=None, points=3):
    fillings = np.linspace(0.0, v_max, points)
    return ValueFunction(theta=np.tile(slope * fillings, (weeks + 1, 1)), filling_levels=fillings,
                         method=method, reserves_enabled=True,
                         discharge_levels=None if discharge is None else np.asarray(discharge, dtype=float))


def with_reserve_price(params: StochasticParams, price: float) -> StochasticParams:
    data = params.model_dump()
    data['reserve_price'] = [price] * params.weeks
    return StochasticParams.model_validate(data)


def test_profit_statistics():
    stats = profit_statistics(np.arange(1.0, 11.0))
    assert stats.expected_profit == pytest.approx(5.5)
    assert stats.rel_std == pytest.approx(np.std(np.arange(1.0, 11.0), ddof=1) / 5.5)
    assert stats.cvar10 == 1.0
    assert profit_statistics(np.arange(1.0, 12.0)).cvar10 == pytest.approx(1.5)


def test_profit_statistics_against_sorting():
    profits = np.random.default_rng(11).normal(1e6, 2e5, 100)
    stats = profit_statistics(profits)
    assert stats.n == 100
    assert stats.expected_profit == pytest.approx(profits.mean(), rel=1e-12)
    assert stats.rel_std == pytest.approx(profits.std(ddof=1) / profits.mean(), rel=1e-12)
    assert stats.cvar10 == pytest.approx(np.sort(profits)[:10].mean(), rel=1e-12)


def test_constant_profits_have_no_spread():
    stats = profit_statistics([4.0, 4.0, 4.0])
    assert stats.rel_std == 0.0
    assert stats.rel_std_pct == 0.0
    assert stats.cvar10 == 4.0
    with pytest.raises(ValidationError):
        profit_statistics([])


def test_dispatch_thresholds():
    plant = single_reservoir_plant(k=1800.0, pump=(8.0, 1400.0))
    generate, pump = dispatch_thresholds(plant, 0.03)
    assert generate == pytest.approx(54.0)
    assert pump == {'P': pytest.approx(42.0)}
    generate, pump = dispatch_thresholds(plant, 0.03, gen_margin=0.1, pump_margin=0.1)
    assert generate == pytest.approx(59.4)
    assert pump['P'] == pytest.approx(37.8)


def test_pump_cut_off_credits_only_the_lifted_energy(reference):
    generate, pump = dispatch_thresholds(reference, 0.05)
    assert generate == pytest.approx(30.0)
    # water in R2 still carries 0.6 of the seasonal energy
    assert pump == {'P1': pytest.approx(0.05 * 1100 * 0.4)}
    assert pump['P1'] < generate


def test_no_hour_both_generates_and_pumps(reference):
    prices = [42.5] * 8 + [25.0] * 8 + [20.0] * 8
    result = dispatch_heuristic(reference, {'R1': 12e6, 'R2': 100_000.0}, week(prices), wv=0.05, q=(0, 0),
                                log=True)
    u, p = result.schedule['u'].to_numpy(), result.schedule['p'].to_numpy()
    assert not ((u > 0) & (p > 0)).any()
    np.testing.assert_allclose(u[:8], 150.0)
    np.testing.assert_array_equal(p[:16], 0.0)
    np.testing.assert_array_equal(u[8:], 0.0)
    assert p[16] == pytest.approx(40.0)
    assert max(abs(r) for r in result.audit({'R1': 12e6, 'R2': 100_000.0}).values()) < 1e-6


def test_generation_is_limited_by_water(single_plant):
    result = dispatch_heuristic(single_plant, {'R': 50_000.0}, week([50.0] * 24), wv=0.04, q=())
    assert result.profit == pytest.approx(2500.0)
    assert result.fillings['R'] == pytest.approx(0.0)
    assert result.audit({'R': 50_000.0})['R'] == pytest.approx(0.0, abs=1e-9)


def test_prices_below_the_water_value_keep_the_water(single_plant):
    result = dispatch_heuristic(single_plant, {'R': 50_000.0}, week([50.0] * 24), wv=0.06, q=())
    assert result.profit == 0.0
    assert result.fillings['R'] == 50_000.0


def test_pumping_stops_at_a_full_reservoir():
    plant = single_reservoir_plant(pump=(8.0, 800.0))
    result = dispatch_heuristic(plant, {'R': 0.0}, week([10.0] * 24), wv=0.05, q=(), log=True)
    assert result.fillings['R'] == pytest.approx(120_000.0)
    assert result.profit == pytest.approx(-10.0 * 120_000.0 / 800.0)
    assert result.spilled['R'] == 0.0
    assert result.schedule['p'].iloc[0] == 8.0
    assert result.schedule['v_R'].iloc[-1] == pytest.approx(120_000.0)


def test_overflow_is_spilled():
    plant = single_reservoir_plant(inflow=True)
    scenario = week([0.0] * 24, inflows={'R': np.full(24, 10_000.0)})
    result = dispatch_heuristic(plant, {'R': 115_000.0}, scenario, wv=0.0, q=())
    assert result.fillings['R'] == 120_000.0
    assert result.spilled['R'] == pytest.approx(235_000.0)
    assert result.audit({'R': 115_000.0})['R'] == pytest.approx(0.0, abs=1e-6)


def test_committed_turbine_runs_in_its_band(reserve_plant):
    result = dispatch_heuristic(reserve_plant, {'R': 240_000.0}, week([30.0] * 24, reserve_price=10.0),
                                wv=0.04, q=(1,))
    assert result.reserve_income == pytest.approx(720.0)
    assert result.profit == pytest.approx(30.0 * 5 * 24 + 720.0)
    assert result.band_violations == 0

    peak = dispatch_heuristic(reserve_plant, {'R': 240_000.0}, week([60.0] * 24), wv=0.04, q=(1,), log=True)
    np.testing.assert_allclose(peak.schedule['u'], 7.0)


def test_market_generation_leaves_water_for_the_set_point(reserve_plant):
    prices = [60.0] * 12 + [30.0] * 12
    result = dispatch_heuristic(reserve_plant, {'R': 130_000.0}, week(prices), wv=0.04, q=(1,), log=True)
    assert result.band_violations == 0
    assert result.fillings['R'] == pytest.approx(0.0, abs=1e-9)
    np.testing.assert_allclose(result.schedule['u'].iloc[:5], 7.0)
    np.testing.assert_allclose(result.schedule['u'].iloc[5:], 5.0)
    assert result.profit == pytest.approx(60.0 * 70 + 30.0 * 60)


def test_cascade_passes_water_through_in_the_same_hour(cascade_plant):
    fillings = {'R1': 1000.0, 'R2': 0.0}
    result = dispatch_heuristic(cascade_plant, fillings, week([60.0, 60.0]), wv=1.0, q=())
    assert result.profit == pytest.approx(1200.0)
    assert result.fillings == pytest.approx({'R1': 0.0, 'R2': 0.0})
    assert all(abs(r) < 1e-9 for r in result.audit(fillings).values())


def test_dispatch_rejects_a_wrong_commitment_vector(reserve_plant):
    with pytest.raises(ValidationError):
        dispatch_heuristic(reserve_plant, {'R': 0.0}, week([1.0] * 24), wv=0.0, q=(1, 0))


def test_sample_streams_are_independent_of_order():
    a = sample_stream(7, 3, 12).random(4)
    sample_stream(7, 0, 1).random(100)
    np.testing.assert_array_equal(sample_stream(7, 3, 12).random(4), a)
    assert not np.array_equal(sample_stream(7, 3, 13).random(4), a)


@pytest.mark.parametrize('price, expected', [(0.0, (0, 0)), (1e5, (1, 1))])
def test_reserve_offer_follows_the_reserve_price(reference, price, expected):
    params = with_reserve_price(reference_params(2), price)
    vf = linear_value_function(2, 30e6, 0.0, discharge=[0.0, 8e6], points=4)
    q = reserve_offer_decision(reference, vf, params, 1, {'R1': 20e6, 'R2': 0.0})
    assert q == expected


def test_reserve_offer_respects_the_flag_and_the_plant(reference, single_plant):
    vf = linear_value_function(2, 30e6, 0.0, discharge=[0.0, 8e6])
    params = with_reserve_price(reference_params(2), 1e5)
    assert reserve_offer_decision(reference, vf, params, 1, {'R1': 20e6, 'R2': 0.0},
                                  reserves_enabled=False) == (0, 0)
    assert reserve_offer_decision(single_plant, vf, flat_params(weeks=2), 1, {'R': 0.0}) == ()


def test_reserve_offer_without_water_is_declined(reference):
    params = with_reserve_price(reference_params(2), 1e5)
    vf = linear_value_function(2, 30e6, 0.0, discharge=[0.0, 8e6])
    planner = ReserveOfferPlanner(reference, vf, params)
    assert reserve_offer_decision(reference, vf, params, 1, {'R1': 0.0, 'R2': 0.0}, planner=planner) == (0, 0)


def test_planner_needs_a_discharge_grid(reference):
    with pytest.raises(ValidationError):
        ReserveOfferPlanner(reference, linear_value_function(2, 30e6, 0.0), reference_params(2))


def test_zero_prices_only_fill_the_reservoir():
    plant = single_reservoir_plant(inflow=True)
    params = flat_params(weeks=3, price=0.0, inflow={'R': [50_000.0] * 3})
    vf = linear_value_function(3, 120_000.0, 0.0, method=1)
    result = simulate_year(plant, vf, params, SimConfig(n_samples=3, seed=1, reserves_enabled=False))
    np.testing.assert_array_equal(result.profits, 0.0)
    np.testing.assert_allclose(result.filling_paths, np.tile([0.0, 50_000.0, 100_000.0, 120_000.0], (3, 1)))
    np.testing.assert_allclose(result.spill_total, 30_000.0)
    assert result.stats.expected_profit == 0.0
    assert result.stats.rel_std == 0.0


def test_simulation_is_reproducible_and_logs_schedules(reference):
    params = reference_params(2)
    vf = linear_value_function(2, 30e6, 0.03, discharge=[0.0, 4e6, 8e6], points=4)
    sim = SimConfig(n_samples=2, seed=5, log_schedules=True)
    a = simulate_year(reference, vf, params, sim)
    b = simulate_year(reference, vf, params, sim)
    np.testing.assert_array_equal(a.profits, b.profits)
    assert (a.audit_residuals <= 1e-6 * 30e6).all()
    assert len(a.schedules) == 2 * 2 * 168
    assert {'sample', 'week', 'hour', 'price', 'inflow', 'u', 'p', 's', 'm', 'filling'} <= set(a.schedules.columns)
    assert a.filling_paths.shape == (2, 3)
    assert a.filling_paths[0, 0] == 12e6


def test_hundred_samples_keep_bands_and_balances(reference):
    params = with_reserve_price(reference_params(2), 4.0)
    vf = linear_value_function(2, 30e6, 0.03, discharge=[-4e6, 0.0, 4e6, 8e6], points=4)
    result = simulate_year(reference, vf, params, SimConfig(n_samples=100, seed=21))
    assert len(result.profits) == 100
    np.testing.assert_array_equal(result.band_violations, 0)
    assert (result.audit_residuals <= 1e-6 * 30e6).all()
    assert (result.filling_paths >= 0.0).all()
    assert (result.filling_paths <= 30e6).all()


def test_reserve_offer_is_the_best_of_all_fixings(reference):
    params = with_reserve_price(reference_params(2), 3.0)
    vf = linear_value_function(2, 30e6, 0.03, discharge=[-2e6, 0.0, 4e6, 8e6], points=4)
    planner = ReserveOfferPlanner(reference, vf, params)
    fillings = {'R1': 20e6, 'R2': 0.0}
    # T3 and T4 have different bands, so (1, 0) and (0, 1) are distinct offers
    scores = {q: planner.score(1, 20e6, q) for q in [(0, 0), (0, 1), (1, 0), (1, 1)]}
    best = None
    for q, s in scores.items():
        if best is None or s > scores[best] + SCORE_TOL * max(1.0, abs(scores[best])):
            best = q
    assert reserve_offer_decision(reference, vf, params, 1, fillings, planner=planner) == best
    assert scores[best] == pytest.approx(max(scores.values()), rel=1e-6)


@pytest.mark.slow
def test_parallel_samples_match_the_serial_run(reference):
    params = reference_params(2)
    vf = linear_value_function(2, 30e6, 0.03, discharge=[0.0, 4e6, 8e6], points=4)
    serial = simulate_year(reference, vf, params, SimConfig(n_samples=4, seed=2))
    parallel = simulate_year(reference, vf, params, SimConfig(n_samples=4, seed=2, workers=2))
    np.testing.assert_array_equal(serial.profits, parallel.profits)


def test_value_function_longer_than_the_parameters(single_plant):
    vf = linear_value_function(3, 120_000.0, 0.0)
    with pytest.raises(ValidationError):
        simulate_year(single_plant, vf, flat_params(weeks=2), SimConfig(n_samples=1, reserves_enabled=False))


def test_foreign_failures_become_simulation_errors(monkeypatch, single_plant):
    import simulator
    from exceptions import SimulationError

    def broken(*args, **kwargs):
        raise RuntimeError('worker died')

    monkeypatch.setattr(simulator, 'dispatch_heuristic', broken)
    vf = linear_value_function(1, 120_000.0, 0.0)
    with pytest.raises(SimulationError, match='worker died'):
        simulate_year(single_plant, vf, flat_params(), SimConfig(n_samples=1, reserves_enabled=False))
