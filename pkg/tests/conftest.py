import numpy as np
import pytest

from models import PlantTopology, Reservoir, StochasticParams, Unit
from plant import reference_plant


@pytest.fixture(autouse=True)
def testing_env(monkeypatch):
    monkeypatch.setenv('HYDRO_ENV', 'testing')
    monkeypatch.delenv('HYDRO_OUTPUT_DIR', raising=False)


def single_reservoir_plant(v_max=120_000.0, v_init=0.0, spill_max=0.0, k=1000.0, p_max=10.0,
                           q_min=0.0, q_max=0.0, pump=None, inflow=False) -> PlantTopology:
    """One seasonal reservoir and one turbine to the tailwater.

    `pump` is an optional (p_max, k) pair for a pump from the lower basin.
    """
    units = [Unit(id='T', kind='turbine', from_reservoir='R', p_max=p_max, k=k,
                  reserve_qualified=q_max > 0, q_min=q_min, q_max=q_max)]
    if pump is not None:
        units.append(Unit(id='P', kind='pump', to_reservoir='R', p_max=pump[0], k=pump[1]))
    return PlantTopology(
        reservoirs=(Reservoir(id='R', kind='seasonal', v_max=v_max, v_init=v_init, spill_max=spill_max),),
        units=tuple(units),
        inflow_points=('R',) if inflow else (),
    )


def flat_params(weeks=1, price=50.0, hours=24, hours_per_day=24, reserve_price=0.0,
                price_sigma=0.0, inflow=None, profile=None, daily_price_sigma=0.0) -> StochasticParams:
    return StochasticParams(
        weekly_price_mean=[price] * weeks,
        hourly_profile=profile if profile is not None else [1.0] * hours,
        price_sigma=price_sigma,
        inflow_mean=inflow or {},
        reserve_price=reserve_price,
        daily_price_sigma=daily_price_sigma,
        hours_per_day=hours_per_day,
    )


@pytest.fixture
def single_plant():
    return single_reservoir_plant()


@pytest.fixture
def reserve_plant():
    return single_reservoir_plant(v_max=240_000.0, q_min=2.0, q_max=3.0)


@pytest.fixture
def reference():
    return reference_plant()


@pytest.fixture
def cascade_plant():
    """Seasonal reservoir feeding a daily one; both units 10 MW, 100 m3/MWh."""
    return PlantTopology(
        reservoirs=(Reservoir(id='R1', kind='seasonal', v_max=1e6),
                    Reservoir(id='R2', kind='daily', v_max=1e6)),
        units=(Unit(id='T1', kind='turbine', from_reservoir='R1', to_reservoir='R2', p_max=10, k=100),
               Unit(id='T2', kind='turbine', from_reservoir='R2', p_max=10, k=100)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240101)
