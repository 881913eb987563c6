"""
Run configuration precedence and validation
"""
import json

import pytest

from refaudit.config import RunConfig, load_run_config
from refaudit.utils.error_handler import ConfigError


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in RunConfig.model_fields:
        monkeypatch.delenv(f"REFAUDIT_{name.upper()}", raising=False)


def test_defaults():
    config = load_run_config()
    assert config.tau_m == 0.8
    assert config.max_iterations == 3
    assert config.poc_max_attempts == 3
    assert config.request_budget == int(65536 * 0.8)


def test_flags_beat_environment_beat_file(tmp_path, monkeypatch):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"tau_m": 0.5, "max_iterations": 7, "turn_budget": 11}))
    monkeypatch.setenv("REFAUDIT_TAU_M", "0.6")
    monkeypatch.setenv("REFAUDIT_MAX_ITERATIONS", "5")

    config = load_run_config(path, {"tau_m": 0.7, "max_iterations": None})
    assert config.tau_m == 0.7
    assert config.max_iterations == 5
    assert config.turn_budget == 11


def test_invalid_values_raise_config_error(tmp_path):
    with pytest.raises(ConfigError, match="tau_m"):
        load_run_config(None, {"tau_m": 1.5})
    with pytest.raises(ConfigError):
        load_run_config(None, {"sandbox_mode": "vm"})

    path = tmp_path / "config.json"
    path.write_text(json.dumps({"no_such_option": 1}))
    with pytest.raises(ConfigError):
        load_run_config(path)


def test_missing_or_malformed_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_run_config(tmp_path / "absent.json")
    path = tmp_path / "config.json"
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="JSON object"):
        load_run_config(path)
