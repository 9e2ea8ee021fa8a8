import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from exceptions import ResourceNotFoundError, StorageError
from intrastage import Schedule
from simulator import SimulationResult
from stochastic import WeeklyScenario
from valuation import ValueFunction, WaterValueTable

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FLOAT_FORMAT = '%.17g'

THETA_COLUMNS = ['method', 'week', 'filling_m3', 'theta_eur']
WATER_VALUE_COLUMNS = ['week', 'filling_mid_m3', 'value_eur_per_m3']
SUMMARY_COLUMNS = ['method', 'reserves', 'expected_profit', 'rel_std_pct', 'cvar10']
PROFIT_COLUMNS = ['method', 'reserves', 'sample', 'profit_eur', 'spill_m3', 'audit_residual_m3',
                  'band_violations', 'reserve_weeks']
PATH_COLUMNS = ['method', 'reserves', 'sample', 'week', 'filling_m3']
SCHEDULE_COLUMNS = ['sample', 'week', 'hour', 'price', 'inflow', 'u', 'p', 's', 'm', 'filling']
TIMING_COLUMNS = ['method', 'reserves', 'seconds', 'peak_memory_mb']
SCENARIO_COLUMNS = ['hour', 'price', 'inflow']
STAGE_SCHEDULE_COLUMNS = ['hour', 'bundle', 'probability', 'u', 'p', 's', 'm', 'v_small']


def reserves_tag(enabled: bool) -> str:
    return 'on' if enabled else 'off'


class ResultsStore:
    """Versioned CSV files of one output directory.

    Every file starts with a `# schema=<name> v=<version> key=value ...`
    line followed by a regular CSV table; floats are written with 17
    significant digits so tables read back bit-exactly.
    """

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)

    def _write(self, name: str, frame: pd.DataFrame, schema: str, **meta) -> Path:
        path = self.directory / name
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            header = ' '.join([f'schema={schema}', f'v={SCHEMA_VERSION}'] + [f'{k}={v}' for k, v in meta.items()])
            with open(path, 'w', newline='') as handle:
                handle.write(f'# {header}\n')
                frame.to_csv(handle, index=False, float_format=FLOAT_FORMAT)
        except OSError as e:
            logger.error(f"Error writing {path}: {e}")
            raise StorageError(f"Failed to write {path}: {str(e)}")
        logger.debug(f"Wrote {len(frame)} rows to {path}")
        return path

    def _read(self, name: str, schema: str) -> Tuple[pd.DataFrame, Dict[str, str]]:
        path = self.directory / name
        if not path.exists():
            raise ResourceNotFoundError(f"Result file {path} not found")
        try:
            with open(path) as handle:
                first = handle.readline().strip()
            meta = dict(item.split('=', 1) for item in first.lstrip('#').split())
            frame = pd.read_csv(path, comment='#', float_precision='round_trip')
        except (OSError, ValueError) as e:
            logger.error(f"Error reading {path}: {e}")
            raise StorageError(f"Failed to read {path}: {str(e)}")
        if meta.get('schema') != schema or meta.get('v') != str(SCHEMA_VERSION):
            raise StorageError(f"{path}: expected schema {schema} v{SCHEMA_VERSION}, found {first!r}")
        return frame, meta

    # value functions

    @staticmethod
    def theta_name(method: int, reserves: bool) -> str:
        return f'theta_m{method}_{reserves_tag(reserves)}.csv'

    @staticmethod
    def water_value_name(method: int, reserves: bool) -> str:
        return f'water_values_m{method}_{reserves_tag(reserves)}.csv'

    def write_value_function(self, vf: ValueFunction) -> Path:
        weeks = np.repeat(np.arange(1, vf.weeks + 2), len(vf.filling_levels))
        frame = pd.DataFrame({
            'method': vf.method,
            'week': weeks,
            'filling_m3': np.tile(vf.filling_levels, vf.weeks + 1),
            'theta_eur': vf.theta.ravel(),
        }, columns=THETA_COLUMNS)
        discharge = ';'.join(FLOAT_FORMAT % w for w in vf.discharge_levels) if vf.discharge_levels is not None else ''
        return self._write(self.theta_name(vf.method, vf.reserves_enabled), frame, 'theta',
                           method=vf.method, reserves=reserves_tag(vf.reserves_enabled),
                           discharge=discharge)

    def read_value_function(self, method: int, reserves: bool) -> ValueFunction:
        frame, meta = self._read(self.theta_name(method, reserves), 'theta')
        fillings = np.sort(frame['filling_m3'].unique())
        theta = frame.pivot(index='week', columns='filling_m3', values='theta_eur').sort_index()
        discharge = meta.get('discharge') or ''
        return ValueFunction(
            theta=theta[fillings].to_numpy(), filling_levels=fillings, method=method,
            reserves_enabled=reserves,
            discharge_levels=np.array([float(w) for w in discharge.split(';')]) if discharge else None,
        )

    def write_water_values(self, table: WaterValueTable, method: int, reserves: bool) -> Path:
        n_weeks, n_mid = table.values.shape
        frame = pd.DataFrame({
            'week': np.repeat(np.arange(1, n_weeks + 1), n_mid),
            'filling_mid_m3': np.tile(table.midpoints, n_weeks),
            'value_eur_per_m3': table.values.ravel(),
        }, columns=WATER_VALUE_COLUMNS)
        return self._write(self.water_value_name(method, reserves), frame, 'water_values',
                           method=method, reserves=reserves_tag(reserves))

    def read_water_values(self, method: int, reserves: bool) -> pd.DataFrame:
        return self._read(self.water_value_name(method, reserves), 'water_values')[0]

    # traced stages

    @staticmethod
    def stage_dir(method: int, reserves: bool) -> str:
        return f'stages/m{method}_{reserves_tag(reserves)}'

    def write_scenario(self, scenario: WeeklyScenario, method: int, reserves: bool, week: int) -> Path:
        """Hourly price and inflow of the scenario a stage was solved on."""
        frame = scenario.to_frame()
        extra = [c for c in frame.columns if c not in SCENARIO_COLUMNS]
        return self._write(f'{self.stage_dir(method, reserves)}/scenario_week{week:02d}.csv',
                           frame[SCENARIO_COLUMNS + extra], 'scenario',
                           method=method, reserves=reserves_tag(reserves), week=week)

    def read_scenario(self, method: int, reserves: bool, week: int) -> pd.DataFrame:
        return self._read(f'{self.stage_dir(method, reserves)}/scenario_week{week:02d}.csv', 'scenario')[0]

    def write_stage_schedule(self, schedule: Schedule, method: int, reserves: bool, week: int,
                             W: Optional[float] = None) -> Path:
        """Intrastage schedule of a stage, one row per hour and bundle."""
        frame = schedule.to_frame()
        extra = [c for c in frame.columns if c not in STAGE_SCHEDULE_COLUMNS]
        meta = {'method': method, 'reserves': reserves_tag(reserves), 'week': week}
        if W is not None:
            meta['W'] = FLOAT_FORMAT % W
        return self._write(f'{self.stage_dir(method, reserves)}/schedule_week{week:02d}.csv',
                           frame[STAGE_SCHEDULE_COLUMNS + extra], 'stage_schedule', **meta)

    def read_stage_schedule(self, method: int, reserves: bool, week: int) -> Tuple[pd.DataFrame, Dict[str, str]]:
        return self._read(f'{self.stage_dir(method, reserves)}/schedule_week{week:02d}.csv', 'stage_schedule')

    def write_stage_traces(self, vf: ValueFunction) -> List[Path]:
        written = []
        for week, trace in sorted(vf.stage_traces.items()):
            written.append(self.write_scenario(trace.scenario, vf.method, vf.reserves_enabled, week))
            written.append(self.write_stage_schedule(trace.schedule, vf.method, vf.reserves_enabled,
                                                     week, trace.W))
        return written

    # simulation outputs

    def write_simulation(self, result: SimulationResult) -> List[Path]:
        tag = reserves_tag(result.reserves_enabled)
        n = len(result.profits)
        profits = pd.DataFrame({
            'method': result.method, 'reserves': tag, 'sample': np.arange(n),
            'profit_eur': result.profits, 'spill_m3': result.spill_total,
            'audit_residual_m3': result.audit_residuals, 'band_violations': result.band_violations,
            'reserve_weeks': result.reserve_weeks,
        }, columns=PROFIT_COLUMNS)
        weeks = result.filling_paths.shape[1]
        paths = pd.DataFrame({
            'method': result.method, 'reserves': tag,
            'sample': np.repeat(np.arange(n), weeks),
            'week': np.tile(np.arange(weeks), n),
            'filling_m3': result.filling_paths.ravel(),
        }, columns=PATH_COLUMNS)
        written = [
            self._write(f'profits_m{result.method}_{tag}.csv', profits, 'profits',
                        method=result.method, reserves=tag),
            self._write(f'filling_paths_m{result.method}_{tag}.csv', paths, 'filling_paths',
                        method=result.method, reserves=tag),
        ]
        if result.schedules is not None:
            written.append(self._write(f'schedules_m{result.method}_{tag}.csv',
                                       result.schedules[SCHEDULE_COLUMNS], 'schedules',
                                       method=result.method, reserves=tag))
        return written

    def read_profits(self, method: int, reserves: bool) -> pd.DataFrame:
        return self._read(f'profits_m{method}_{reserves_tag(reserves)}.csv', 'profits')[0]

    def write_summary(self, rows: List[Dict[str, object]], name: str = 'summary.csv') -> Path:
        return self._write(name, pd.DataFrame(rows, columns=SUMMARY_COLUMNS), 'summary')

    def read_summary(self, name: str = 'summary.csv') -> pd.DataFrame:
        return self._read(name, 'summary')[0]

    def append_timing(self, method: int, reserves: bool, seconds: float,
                      peak_memory_mb: Optional[float]) -> Path:
        """Add one line to timing.csv, replacing an earlier line of the same run."""
        row = {'method': method, 'reserves': reserves_tag(reserves), 'seconds': seconds,
               'peak_memory_mb': peak_memory_mb}
        try:
            frame = self._read('timing.csv', 'timing')[0]
            keep = ~((frame['method'] == method) & (frame['reserves'] == row['reserves']))
            frame = pd.concat([frame[keep], pd.DataFrame([row])], ignore_index=True)
        except ResourceNotFoundError:
            frame = pd.DataFrame([row], columns=TIMING_COLUMNS)
        frame = frame.sort_values(['method', 'reserves'], kind='stable').reset_index(drop=True)
        return self._write('timing.csv', frame[TIMING_COLUMNS], 'timing')

    def read_timing(self) -> pd.DataFrame:
        return self._read('timing.csv', 'timing')[0]

    def write_report(self, frame: pd.DataFrame, name: str, **meta) -> Path:
        return self._write(name, frame, 'compare', **meta)

    def read_report(self, name: str) -> pd.DataFrame:
        return self._read(name, 'compare')[0]
