import json
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

from dotenv import load_dotenv
from pydantic import ValidationError as PydanticValidationError

from exceptions import ResourceNotFoundError, ValidationError
from models import RunConfig

# Load environment variables from .env file
load_dotenv()


class Config:
    """Base configuration."""
    # Logging
    LOG_LEVEL = os.environ.get('HYDRO_LOG_LEVEL', 'INFO')
    LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    LOG_FILE = os.environ.get('HYDRO_LOG_FILE')
    LOG_MAX_BYTES = 1024 * 1024
    LOG_BACKUP_COUNT = 5

    # Outputs
    OUTPUT_DIR = os.environ.get('HYDRO_OUTPUT_DIR')
    DUMP_LP_DIR = os.environ.get('HYDRO_DUMP_LP_DIR', 'lp_dumps')


class DevelopmentConfig(Config):
    """Development configuration."""
    LOG_LEVEL = os.environ.get('HYDRO_LOG_LEVEL', 'DEBUG')


class TestingConfig(Config):
    """Testing configuration."""
    LOG_LEVEL = 'WARNING'
    LOG_FILE = None


class ProductionConfig(Config):
    """Production configuration."""
    # Ensure outputs never land in an implicit location
    def __init__(self):
        if not os.environ.get('HYDRO_OUTPUT_DIR'):
            raise ValidationError("HYDRO_OUTPUT_DIR must be set in production")

    LOG_LEVEL = os.environ.get('HYDRO_LOG_LEVEL', 'INFO')


# Map environment names to config classes
config = {
    'development': DevelopmentConfig,
    'testing': TestingConfig,
    'production': ProductionConfig,
    'default': DevelopmentConfig
}


def get_config() -> Config:
    """Return the settings object for the current HYDRO_ENV."""
    env = os.environ.get('HYDRO_ENV', 'default')
    return config.get(env, config['default'])()


def load_run_config(path: Union[str, Path],
                    overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Load and validate a JSON run configuration.

    Args:
        path: Path to the JSON configuration file
        overrides: Top-level keys replacing the file's values (CLI flags)

    Returns:
        RunConfig: The validated configuration; the output directory is
        replaced by HYDRO_OUTPUT_DIR when that variable is set

    Raises:
        ResourceNotFoundError: If the file does not exist
        ValidationError: If the file is not valid JSON or fails validation
    """
    path = Path(path)
    if not path.exists():
        raise ResourceNotFoundError(f"Configuration file {path} not found")

    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"Configuration file {path} is not valid JSON: {e}")

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == 'simulation':
            data.setdefault('simulation', {}).update(value)
        else:
            data[key] = value

    env_output = os.environ.get('HYDRO_OUTPUT_DIR')
    if env_output:
        data.setdefault('output', {})['directory'] = env_output

    try:
        return RunConfig.model_validate(data)
    except PydanticValidationError as e:
        raise ValidationError(f"Invalid configuration {path}: {e}")
