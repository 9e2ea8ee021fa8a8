import logging
from functools import lru_cache
from typing import Any, Dict, Optional, Union

from pydantic import ValidationError as PydanticValidationError

from exceptions import ValidationError
from models import PlantTopology, Reservoir, Unit

logger = logging.getLogger(__name__)


def validate_topology(plant: Union[PlantTopology, Dict[str, Any]]) -> PlantTopology:
    """Validate a plant description.

    Args:
        plant: A PlantTopology or its dict form (as read from a config file)

    Returns:
        PlantTopology: The validated, immutable plant

    Raises:
        ValidationError: Naming the violated invariant and the entity id
    """
    try:
        if isinstance(plant, PlantTopology):
            plant = plant.model_dump()
        return PlantTopology.model_validate(plant)
    except PydanticValidationError as e:
        messages = "; ".join(err['msg'] for err in e.errors())
        logger.error(f"Invalid plant topology: {messages}")
        raise ValidationError(f"Invalid plant topology: {messages}")


def energy_to_volume(unit: Unit, power: float, hours: float = 1.0) -> float:
    """Water moved by `unit` running at `power` MW for `hours` hours (m3)."""
    if power < 0 or power > unit.p_max + 1e-9:
        raise ValidationError(f"unit {unit.id}: power {power} MW outside [0, {unit.p_max}]")
    return unit.k * power * hours


def seasonal_reservoir(plant: PlantTopology) -> Reservoir:
    """The single seasonal reservoir the master problem is defined on."""
    if len(plant.seasonal) != 1:
        raise ValidationError(
            f"the master problem needs exactly one seasonal reservoir, "
            f"got {[r.id for r in plant.seasonal]}"
        )
    return plant.seasonal[0]


def is_aggregated(plant: PlantTopology) -> bool:
    return (len(plant.reservoirs) == 1 and len(plant.turbines) <= 1
            and len(plant.pumps) <= 1
            and all(p.from_reservoir is None for p in plant.pumps))


def aggregate_plant(plant: PlantTopology) -> PlantTopology:
    """Collapse a plant into one reservoir, one turbine and one pump.

    Conversion factors are averaged with p_max weights so the total flow at
    full output is preserved. The aggregated pump draws from an infinite
    lower basin and the aggregated turbine carries the summed reserve band
    of all qualified turbines.
    """
    if is_aggregated(plant):
        return plant

    target = plant.seasonal[0].id
    reservoir = Reservoir(
        id=target,
        kind='seasonal',
        v_max=sum(r.v_max for r in plant.reservoirs),
        v_init=sum(r.v_init for r in plant.reservoirs),
        spill_max=sum(r.spill_max for r in plant.reservoirs),
    )

    units = []
    turbines = plant.turbines
    if turbines:
        p_total = sum(u.p_max for u in turbines)
        qualified = [u for u in turbines if u.reserve_qualified]
        units.append(Unit(
            id='aggregate_turbine',
            kind='turbine',
            from_reservoir=target,
            to_reservoir=None,
            p_max=p_total,
            k=sum(u.p_max * u.k for u in turbines) / p_total,
            reserve_qualified=True,
            q_min=sum(u.q_min for u in qualified),
            q_max=sum(u.q_max for u in qualified),
        ))
    pumps = plant.pumps
    if pumps:
        p_total = sum(u.p_max for u in pumps)
        units.append(Unit(
            id='aggregate_pump',
            kind='pump',
            from_reservoir=None,
            to_reservoir=target,
            p_max=p_total,
            k=sum(u.p_max * u.k for u in pumps) / p_total,
        ))

    aggregated = PlantTopology(
        reservoirs=(reservoir,),
        units=tuple(units),
        inflow_points=(target,) if plant.inflow_points else (),
    )
    logger.debug(f"Aggregated {len(plant.reservoirs)} reservoirs and {len(plant.units)} units")
    return aggregated


@lru_cache(maxsize=128)
def reservoir_energy(plant: PlantTopology, reservoir_id: Optional[str]) -> float:
    """MWh produced by one m3 stored in `reservoir_id` along its best turbine route.

    Water outside the plant (`None`) is worth nothing.
    """
    if reservoir_id is None:
        return 0.0
    options = [1.0 / u.k + reservoir_energy(plant, u.to_reservoir)
               for u in plant.turbines if u.from_reservoir == reservoir_id]
    return max(options, default=0.0)


def energy_equivalent(plant: PlantTopology) -> float:
    """MWh produced by one m3 of seasonal water along the best turbine cascade."""
    return reservoir_energy(plant, seasonal_reservoir(plant).id)


def reference_plant() -> PlantTopology:
    """Synthetic two-reservoir pumped-storage plant.

    One seasonal reservoir feeds a daily reservoir through an upper turbine;
    a pump lifts water back, and two reserve-qualified turbines release the
    daily reservoir to the tailwater. The numbers are invented; they only
    reproduce the shape of a typical Alpine scheme.
    """
    return PlantTopology(
        reservoirs=(
            Reservoir(id='R1', kind='seasonal', v_max=30e6, v_init=12e6, spill_max=50_000),
            Reservoir(id='R2', kind='daily', v_max=600_000, v_init=0, spill_max=50_000),
        ),
        units=(
            Unit(id='T1', kind='turbine', from_reservoir='R1', to_reservoir='R2',
                 p_max=60, k=1500),
            Unit(id='P1', kind='pump', from_reservoir='R2', to_reservoir='R1',
                 p_max=40, k=1100),
            Unit(id='T3', kind='turbine', from_reservoir='R2', to_reservoir=None,
                 p_max=45, k=1000, reserve_qualified=True, q_min=10, q_max=10),
            Unit(id='T4', kind='turbine', from_reservoir='R2', to_reservoir=None,
                 p_max=45, k=1000, reserve_qualified=True, q_min=10, q_max=12),
        ),
        inflow_points=('R1', 'R2'),
    )
