import json

import pytest

from config import DevelopmentConfig, ProductionConfig, TestingConfig, get_config, load_run_config
from exceptions import ResourceNotFoundError, ValidationError


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({
        'methods': [1, 3],
        'reserves': 'off',
        'simulation': {'n_samples': 20, 'seed': 4},
        'output': {'directory': 'results/run'},
    }))
    return path


def test_environment_selects_the_settings(monkeypatch):
    assert isinstance(get_config(), TestingConfig)
    monkeypatch.setenv('HYDRO_ENV', 'staging')
    assert isinstance(get_config(), DevelopmentConfig)


def test_production_needs_an_output_directory(monkeypatch, tmp_path):
    monkeypatch.setenv('HYDRO_ENV', 'production')
    with pytest.raises(ValidationError):
        get_config()
    monkeypatch.setenv('HYDRO_OUTPUT_DIR', str(tmp_path))
    assert isinstance(get_config(), ProductionConfig)


def test_load_run_config(config_file):
    config = load_run_config(config_file)
    assert config.methods == (1, 3)
    assert config.reserve_flags == (False,)
    assert config.simulation.n_samples == 20
    assert config.output.directory == 'results/run'


def test_overrides_replace_file_values(config_file):
    config = load_run_config(config_file, {'methods': [4], 'reserves': None, 'simulation': {'n_samples': 3}})
    assert config.methods == (4,)
    assert config.reserve_flags == (False,)
    assert config.simulation.n_samples == 3
    assert config.simulation.seed == 4


def test_environment_output_directory_wins(monkeypatch, config_file, tmp_path):
    monkeypatch.setenv('HYDRO_OUTPUT_DIR', str(tmp_path / 'env'))
    assert load_run_config(config_file).output.directory == str(tmp_path / 'env')


def test_missing_file(tmp_path):
    with pytest.raises(ResourceNotFoundError):
        load_run_config(tmp_path / 'absent.json')


def test_malformed_file(tmp_path):
    path = tmp_path / 'bad.json'
    path.write_text('{"methods": [1,')
    with pytest.raises(ValidationError, match='not valid JSON'):
        load_run_config(path)


def test_invalid_values(tmp_path):
    path = tmp_path / 'bad.json'
    path.write_text(json.dumps({'methods': [7]}))
    with pytest.raises(ValidationError, match='Invalid configuration'):
        load_run_config(path)
