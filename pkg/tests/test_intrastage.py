import itertools

import numpy as np
import pytest

from conftest import single_reservoir_plant
from exceptions import InfeasibleStageError, ValidationError
from intrastage import (StageInput, dump_stage_lp, fixing_values, method1_stage_value, method2_stage_value,
                        method3_intrastage, method4_intrastage, reserve_fixings, stage_value)
from models import StochasticParams
from stochastic import (ScenarioTree, WeeklyScenario, build_price_tree, expected_week,
                        reference_hourly_profile, reference_params, sample_week)

CASCADE_TREE_PRICES = [[10.0, 40.0, 20.0, 30.0], [10.0, 40.0, 35.0, 5.0]]


def flat_week(price=50.0, hours=24, reserve_price=0.0, inflows=None):
    return WeeklyScenario(prices=np.full(hours, price), inflows=inflows or {}, reserve_price=reserve_price)


def short_week_params():
    """Four 12-hour days with volatile daily price levels."""
    return StochasticParams(
        weekly_price_mean=[50.0], hourly_profile=reference_hourly_profile(hours_per_day=12, days=4),
        price_sigma=0.2, inflow_mean={'R1': [2e5], 'R2': [2e4]}, inflow_sigma=0.2,
        reserve_price=10.0, daily_price_sigma=0.4, hours_per_day=12,
    )


def test_method2_generates_the_required_hours(single_plant):
    stage = StageInput(plant=single_plant, W=100_000.0, scenario=flat_week(), reserves_enabled=False)
    result = method2_stage_value(stage)
    assert result.details['h_u'] == 10
    assert result.value == pytest.approx(5000.0)


def test_method2_keeps_the_water_on_a_flat_price_curve():
    plant = single_reservoir_plant(pump=(8.0, 800.0))
    stage = StageInput(plant=plant, W=0.0, scenario=flat_week(price=40.0), reserves_enabled=False)
    result = method2_stage_value(stage)
    assert result.details['h_u'] == 0
    assert result.details['h_p'] == 0
    assert result.value == 0.0


def test_method1_spreads_the_discharge_over_peak_hours(single_plant):
    stage = StageInput(plant=single_plant, W=100_000.0, scenario=flat_week(), reserves_enabled=False)
    result = method1_stage_value(stage)
    assert result.value == pytest.approx(5000.0)
    assert result.details['u'] == pytest.approx(100_000.0 / 12_000.0)


def test_stage_input_checks_the_filling_range(single_plant):
    with pytest.raises(ValidationError):
        StageInput(plant=single_plant, W=200.0, scenario=flat_week(), v_big_prev=100.0)


def test_unreachable_discharge_is_infeasible(single_plant):
    # 24 hours at 10 MW release at most 240000 m3 and nothing may be spilled
    stage = StageInput(plant=single_plant, W=300_000.0, scenario=flat_week(), reserves_enabled=False)
    for method in (1, 2, 3):
        with pytest.raises(InfeasibleStageError):
            stage_value(method, stage)


def test_methods_1_and_2_agree_on_two_level_prices(rng):
    plant = single_reservoir_plant(v_max=1e6, pump=(8.0, 400.0))
    peak = np.zeros(24, dtype=bool)
    peak[8:20] = True
    for _ in range(24):
        c_pk = rng.uniform(40, 100)
        c_off = rng.uniform(0.5, 0.95) * c_pk
        h = int(rng.integers(0, 13))
        week = WeeklyScenario(prices=np.where(peak, c_pk, c_off), inflows={}, reserve_price=0.0)
        stage = StageInput(plant=plant, W=h * 10_000.0, scenario=week, reserves_enabled=False)
        m1 = method1_stage_value(stage).value
        m2 = method2_stage_value(stage).value
        assert m2 == pytest.approx(m1, rel=1e-6, abs=1e-6)
        assert m2 == pytest.approx(10 * h * c_pk)


def test_method3_on_tiny_cascade_matches_enumeration(cascade_plant):
    prices = np.array(CASCADE_TREE_PRICES[0])
    week = WeeklyScenario(prices=prices, inflows={}, reserve_price=0.0)
    result = method3_intrastage(StageInput(plant=cascade_plant, W=1500.0, scenario=week, hours_per_day=2))

    levels = np.array([0.0, 5.0, 10.0])
    combos = np.array(list(itertools.product(levels, repeat=4)))
    total = combos.sum(axis=1)
    cum = np.cumsum(combos, axis=1)
    revenue = combos @ prices
    feasible = (total[:, None] == 15) & (total[None, :] == 15) & (cum[:, None, :] >= cum[None, :, :]).all(-1)
    brute = np.where(feasible, revenue[:, None] + revenue[None, :], -np.inf).max()

    assert brute == pytest.approx(1100.0)
    assert result.value == pytest.approx(brute, rel=1e-6)
    schedule = result.schedule
    assert schedule.v_small[-1, 0] == pytest.approx(0.0, abs=1e-6)
    np.testing.assert_allclose(schedule.market, schedule.power.sum(axis=1), atol=1e-6)


def test_method4_on_tiny_tree_matches_enumeration(cascade_plant):
    tree = ScenarioTree(scenario_prices=CASCADE_TREE_PRICES, probabilities=[0.5, 0.5],
                        day_labels=[[0, 0], [0, 1]], hours_per_day=2, inflows={}, reserve_price=0.0)
    result = method4_intrastage(StageInput(plant=cascade_plant, W=1500.0, scenario=tree, hours_per_day=2))

    # node columns: hour 1, hour 2, hours 3-4 of scenario 1, hours 3-4 of scenario 2
    levels = np.array([0.0, 5.0, 10.0])
    combos = np.array(list(itertools.product(levels, repeat=6)))
    paths = [combos[:, [0, 1, 2, 3]], combos[:, [0, 1, 4, 5]]]
    revenue = sum(0.5 * path @ np.array(p) for path, p in zip(paths, CASCADE_TREE_PRICES))
    feasible = np.ones((len(combos), len(combos)), dtype=bool)
    for path in paths:
        total = path.sum(axis=1)
        cum = np.cumsum(path, axis=1)
        feasible &= (total[:, None] == 15) & (total[None, :] == 15) & (cum[:, None, :] >= cum[None, :, :]).all(-1)
    brute = np.where(feasible, revenue[:, None] + revenue[None, :], -np.inf).max()

    assert brute == pytest.approx(1125.0)
    assert result.value == pytest.approx(brute, rel=1e-6)
    frame = result.schedule.to_frame()
    assert len(frame) == tree.n_nodes
    assert list(frame['bundle']) == [0, 0, 0, 1, 0, 1]


def test_single_branch_tree_equals_method3(reference, rng):
    params = reference_params()
    for _ in range(20):
        week = int(rng.integers(1, 53))
        W = float(rng.uniform(0.0, 4e6))
        scenario = sample_week(params, week, rng)
        m3 = method3_intrastage(StageInput(plant=reference, W=W, scenario=scenario))
        m4 = method4_intrastage(StageInput(plant=reference, W=W, scenario=ScenarioTree.from_scenario(scenario)))
        assert m4.value == pytest.approx(m3.value, rel=1e-9)
        assert m4.q == m3.q


def test_sampled_single_branch_tree_equals_method3(reference):
    params = reference_params(5)
    tree = build_price_tree(params, 5, 1, np.random.default_rng(3))
    scenario = sample_week(params, 5, np.random.default_rng(3))
    m3 = method3_intrastage(StageInput(plant=reference, W=1e6, scenario=scenario))
    m4 = method4_intrastage(StageInput(plant=reference, W=1e6, scenario=tree))
    assert m4.value == pytest.approx(m3.value, rel=1e-9)


def test_perfect_information_bounds_the_tree_value(reference, rng):
    params = short_week_params()
    gaps = []
    for _ in range(10):
        W = float(rng.uniform(0.5e6, 2e6))
        tree = build_price_tree(params, 1, 2, rng)
        m4 = method4_intrastage(StageInput(plant=reference, W=W, scenario=tree, hours_per_day=12))
        m3 = method3_intrastage(StageInput(plant=reference, W=W, scenario=tree.leaf_scenarios(),
                                           hours_per_day=12))
        assert m3.value >= m4.value - 1e-7 * abs(m4.value)
        gaps.append(m3.value - m4.value)
    assert max(gaps) > 1e-6 * abs(m4.value)


@pytest.mark.slow
def test_perfect_information_bound_on_a_full_week(reference, rng):
    params = reference_params(1)
    for _ in range(2):
        W = float(rng.uniform(1e6, 4e6))
        tree = build_price_tree(params, 1, 2, rng)
        m4 = method4_intrastage(StageInput(plant=reference, W=W, scenario=tree))
        m3 = method3_intrastage(StageInput(plant=reference, W=W, scenario=tree.leaf_scenarios()))
        assert m3.value >= m4.value - 1e-7 * abs(m4.value)


@pytest.mark.slow
def test_full_week_tree_solves_at_desk_scale(reference):
    import time

    tree = build_price_tree(reference_params(1), 1, 2, np.random.default_rng(0))
    start = time.perf_counter()
    result = method4_intrastage(StageInput(plant=reference, W=2e6, scenario=tree, reserves_enabled=False))
    assert time.perf_counter() - start < 60
    assert len(result.schedule.node_hour) == 6096


def test_reserve_option_never_lowers_the_stage_value(reference):
    scenario = expected_week(reference_params(), 20)
    for W in (0.0, 2e6, 8e6):
        on = method3_intrastage(StageInput(plant=reference, W=W, scenario=scenario, reserves_enabled=True))
        off = method3_intrastage(StageInput(plant=reference, W=W, scenario=scenario, reserves_enabled=False))
        assert on.value >= off.value - 1e-7 * abs(off.value)
        assert off.q == (0, 0)


def test_committed_turbines_stay_in_their_band(reference):
    params = reference_params()
    data = params.model_dump()
    data['reserve_price'] = [1000.0] * params.weeks
    scenario = expected_week(StochasticParams.model_validate(data), 26)
    result = method3_intrastage(StageInput(plant=reference, W=8e6, scenario=scenario))
    assert result.q == (1, 1)
    for unit in reference.reserve_units:
        power = result.schedule.unit_power(unit.id)
        assert power.min() >= unit.setpoint - 1e-6
        assert power.max() <= unit.p_max - unit.q_max + 1e-6
    assert result.schedule.v_small[-1].max() == pytest.approx(0.0, abs=1e-6)


def test_method4_schedule_keeps_bands_and_balances(reference):
    data = short_week_params().model_dump()
    data['reserve_price'] = [1000.0]
    tree = build_price_tree(StochasticParams.model_validate(data), 1, 2, np.random.default_rng(8))
    W = 2e6
    result = method4_intrastage(StageInput(plant=reference, W=W, scenario=tree, hours_per_day=12))
    assert result.q == (1, 1)
    schedule = result.schedule
    for unit in reference.reserve_units:
        power = schedule.unit_power(unit.id)
        assert power.min() >= unit.setpoint - 1e-6
        assert power.max() <= unit.p_max - unit.q_max + 1e-6

    k = {u.id: u.k for u in reference.units}
    scale = 1e-6 * max(r.v_max for r in reference.daily)
    for s in range(tree.n_scenarios):
        path = schedule.for_scenario(s)
        flow = (k['T3'] * path.unit_power('T3') + k['T4'] * path.unit_power('T4')
                + k['P1'] * path.unit_power('P1') - k['T1'] * path.unit_power('T1'))
        stored = path.v_small[:, 0]
        change = stored - np.concatenate([[0.0], stored[:-1]])
        residual = change + path.spill[:, 0] + flow - tree.inflows['R2']
        assert np.abs(residual).max() < scale
        assert stored[-1] == pytest.approx(0.0, abs=1e-6)
        # the seasonal reservoir loses exactly W along every path
        seasonal = (k['T1'] * path.unit_power('T1').sum() - k['P1'] * path.unit_power('P1').sum()
                    + path.seasonal_spill[0] - tree.inflows['R1'].sum())
        assert seasonal == pytest.approx(W, abs=scale)


def test_fixed_reserve_commitment(reference):
    scenario = expected_week(reference_params(), 26)
    stage = StageInput(plant=reference, W=8e6, scenario=scenario, q_fixed=(1, 0))
    assert method3_intrastage(stage).q == (1, 0)
    with pytest.raises(ValidationError):
        reserve_fixings(reference, False, (1, 0))


def test_per_scenario_reserve_choice_is_worth_at_least_a_shared_one(reference, rng):
    params = reference_params()
    scenarios = [sample_week(params, 30, rng) for _ in range(3)]
    shared = method3_intrastage(StageInput(plant=reference, W=4e6, scenario=scenarios))
    separate = method3_intrastage(StageInput(plant=reference, W=4e6, scenario=scenarios, shared_reserve=False))
    assert separate.value >= shared.value - 1e-7 * abs(shared.value)


def test_fixing_values_report_infeasible_fixings(reserve_plant):
    # the band needs 120000 m3 over the day, 60000 is only reachable without it
    week = flat_week(reserve_price=5.0)
    values = fixing_values(3, reserve_plant, 60_000.0, week, [(0,), (1,)])
    assert values[(1,)] == -np.inf
    assert values[(0,)] == pytest.approx(3000.0)


def test_method4_needs_a_tree(reference):
    with pytest.raises(ValidationError):
        method4_intrastage(StageInput(plant=reference, W=0.0, scenario=expected_week(reference_params(), 1)))


def test_dump_stage_lp(tmp_path, single_plant):
    stage = StageInput(plant=single_plant, W=50_000.0, scenario=flat_week())
    path = dump_stage_lp(3, stage, tmp_path / 'week.lp')
    assert 'Maximize' in path.read_text()
    with pytest.raises(ValidationError):
        dump_stage_lp(2, stage, tmp_path / 'pdc.lp')
