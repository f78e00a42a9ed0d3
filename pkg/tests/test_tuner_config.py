"""Settings loading and the error hierarchy."""

import pytest

from tuner_config import DEFAULT_LOG_FORMAT, TunerSettings, load_settings, normalize_mode
from tuner_errors import (ConfigError, DatasetError, HesTunerError, HierarchyError, InfeasibleError,
                          MatrixFormatError, OffGridError, SearchSpaceError, SsmcDownloadError)


def test_defaults_without_environment():
    settings = load_settings(environ={})
    assert settings == TunerSettings()
    assert settings.mode == "work_units"
    assert settings.log_format == DEFAULT_LOG_FORMAT


def test_environment_overrides():
    settings = load_settings(environ={
        'HES_TUNER_JOBS': '4',
        'HES_TUNER_MODE': 'wall-time',
        'HES_TUNER_LOG_LEVEL': 'debug',
        'HES_TUNER_SEED': '17',
        'HES_TUNER_SSMC_CACHE': '/tmp/cache',
        'HES_TUNER_HTTP_TIMEOUT': '2.5',
    })
    assert settings.jobs == 4
    assert settings.mode == "wall_time"
    assert settings.log_level == "DEBUG"
    assert settings.seed == 17
    assert settings.ssmc_cache_dir == "/tmp/cache"
    assert settings.http_timeout == 2.5


def test_every_invalid_variable_is_reported():
    with pytest.raises(ConfigError) as excinfo:
        load_settings(environ={'HES_TUNER_JOBS': '0', 'HES_TUNER_HTTP_TIMEOUT': 'soon',
                               'HES_TUNER_MODE': 'fast'})
    message = str(excinfo.value)
    assert 'HES_TUNER_JOBS' in message
    assert 'HES_TUNER_HTTP_TIMEOUT' in message
    assert 'HES_TUNER_MODE' in message


def test_empty_values_are_ignored():
    assert load_settings(environ={'HES_TUNER_JOBS': ''}).jobs == 1


@pytest.mark.parametrize("text,expected", [("work-units", "work_units"), ("WALL_TIME", "wall_time")])
def test_normalize_mode(text, expected):
    assert normalize_mode(text) == expected


def test_normalize_mode_rejects_unknown():
    with pytest.raises(ConfigError):
        normalize_mode("cpu-cycles")


def test_error_messages_carry_location():
    assert str(MatrixFormatError("bad entry", 7)).startswith("line 7: ")
    assert MatrixFormatError("bad entry", 7).line_number == 7
    assert str(HierarchyError("singular", 2)).startswith("level 2: ")
    error = OffGridError("trunc_factor", 0.33)
    assert error.parameter == "trunc_factor"
    assert "trunc_factor" in str(error)


def test_hierarchy():
    for cls in (ConfigError, DatasetError, SearchSpaceError, SsmcDownloadError):
        assert issubclass(cls, HesTunerError)
    assert issubclass(OffGridError, SearchSpaceError)
    assert InfeasibleError("none", trace=[1]).trace == [1]


def test_env_file_is_loaded(tmp_path, monkeypatch):
    env_file = tmp_path / "tuner.env"
    env_file.write_text("HES_TUNER_SEED=23\nHES_TUNER_JOBS=3\n")
    # registered first so teardown removes whatever the .env file sets
    for name in ('HES_TUNER_SEED', 'HES_TUNER_JOBS'):
        monkeypatch.setenv(name, "1")
        monkeypatch.delenv(name)
    settings = load_settings(env_file=str(env_file))
    assert settings.seed == 23
    assert settings.jobs == 3


def test_environment_wins_over_env_file(tmp_path, monkeypatch):
    env_file = tmp_path / "tuner.env"
    env_file.write_text("HES_TUNER_SEED=23\n")
    monkeypatch.setenv('HES_TUNER_SEED', "5")
    assert load_settings(env_file=str(env_file)).seed == 5
