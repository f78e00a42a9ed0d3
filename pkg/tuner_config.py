#!/usr/bin/env python3
"""
HES Tuner settings
Process-wide defaults loaded from a .env file and HES_TUNER_* environment variables.
"""

import os
import logging
from dataclasses import dataclass
from typing import Dict, Optional

from dotenv import load_dotenv

from tuner_errors import ConfigError

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.1.0"
DEFAULT_LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
FITNESS_MODES = ("wall_time", "work_units")


@dataclass
class TunerSettings:
    """Configuration shared by every CLI command."""
    jobs: int = 1
    log_level: str = "INFO"
    log_format: str = DEFAULT_LOG_FORMAT
    artifact_dir: str = "artifacts"
    mode: str = "work_units"
    seed: int = 0
    ssmc_base_url: str = "https://sparse.tamu.edu"
    ssmc_cache_dir: str = os.path.join("artifacts", "ssmc")
    http_timeout: float = 60.0


_ENV_VARS = {
    'jobs': 'HES_TUNER_JOBS',
    'log_level': 'HES_TUNER_LOG_LEVEL',
    'artifact_dir': 'HES_TUNER_ARTIFACT_DIR',
    'mode': 'HES_TUNER_MODE',
    'seed': 'HES_TUNER_SEED',
    'ssmc_base_url': 'HES_TUNER_SSMC_URL',
    'ssmc_cache_dir': 'HES_TUNER_SSMC_CACHE',
    'http_timeout': 'HES_TUNER_HTTP_TIMEOUT',
}


def normalize_mode(mode: str) -> str:
    """Accept both 'work-units' (CLI spelling) and 'work_units'."""
    value = mode.strip().lower().replace("-", "_")
    if value not in FITNESS_MODES:
        raise ConfigError(f"Unknown fitness mode '{mode}', expected one of: wall-time, work-units")
    return value


def load_settings(env_file: Optional[str] = None, environ: Optional[Dict[str, str]] = None) -> TunerSettings:
    """
    Load settings from the environment.

    Args:
        env_file: Optional .env path; the default .env lookup is used when None
        environ: Mapping to read instead of os.environ (used by tests)

    Returns:
        TunerSettings with every recognised variable applied
    """
    if environ is None:
        if env_file:
            load_dotenv(env_file)
        else:
            load_dotenv()
        environ = dict(os.environ)

    settings = TunerSettings()
    invalid = []

    for field_name, env_var in _ENV_VARS.items():
        raw = environ.get(env_var)
        if raw is None or raw == "":
            continue
        try:
            if field_name in ('jobs', 'seed'):
                value = int(raw)
                if field_name == 'jobs' and value < 1:
                    raise ValueError(raw)
            elif field_name == 'http_timeout':
                value = float(raw)
                if value <= 0:
                    raise ValueError(raw)
            elif field_name == 'mode':
                value = normalize_mode(raw)
            elif field_name == 'log_level':
                value = raw.upper()
                if value not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
                    raise ValueError(raw)
            else:
                value = raw
        except (ValueError, ConfigError):
            invalid.append(f"{env_var}={raw!r}")
            continue
        setattr(settings, field_name, value)

    if invalid:
        raise ConfigError(f"Invalid environment variables: {', '.join(invalid)}")

    return settings
