"""
Configuration management module
Manages environment variables, config files and run configuration
"""
import json
import os
from pathlib import Path
from typing import Any, Dict, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from refaudit.utils.error_handler import ConfigError

# Load environment variables
load_dotenv()

ENV_PREFIX = "REFAUDIT_"


class Settings:
    """Process-level configuration read from the environment"""

    def __init__(self):
        self.state_dir = os.getenv("REFAUDIT_STATE_DIR", ".refaudit")
        self.log_level = os.getenv("REFAUDIT_LOG_LEVEL", "INFO")
        self.api_key = os.getenv("REFAUDIT_API_KEY") or os.getenv("OPENAI_API_KEY")
        self.fallback_api_key = os.getenv("REFAUDIT_FALLBACK_API_KEY") or self.api_key

        # Code-facts limits
        self.search_line_width = int(os.getenv("REFAUDIT_SEARCH_LINE_WIDTH", "400"))
        self.search_max_hits = int(os.getenv("REFAUDIT_SEARCH_MAX_HITS", "200"))
        self.read_max_lines = int(os.getenv("REFAUDIT_READ_MAX_LINES", "400"))

    def auth_headers(self, fallback: bool = False) -> Dict[str, str]:
        """Get HTTP headers for the chat and embedding endpoints"""
        key = self.fallback_api_key if fallback else self.api_key
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers


class RunConfig(BaseModel):
    """Pipeline configuration shared by every command"""
    model_config = ConfigDict(extra="forbid")

    state_dir: Path = Path(".refaudit")

    # Backends
    chat_backend: Literal["http", "scripted"] = "http"
    chat_endpoint: str = "http://localhost:8000/v1"
    chat_model: str = "deepseek-v3.2"
    fallback_endpoint: Optional[str] = None
    fallback_model: Optional[str] = None
    embedding_backend: Literal["http", "hashing", "scripted"] = "http"
    embedding_endpoint: str = "http://localhost:8001/v1"
    embedding_model: str = "local-embedding"
    scripted_fixture: Optional[Path] = None
    request_timeout_s: float = 120.0
    temperature: float = 0.1
    top_p: float = 0.9
    context_window: int = Field(default=65536, gt=0)

    # Selection and prioritization
    tau_m: float = 0.8
    keep_threshold: float = 0.5
    min_threshold_hits: int = Field(default=3, ge=1)
    supplement_size: int = Field(default=5, ge=1)

    # Profiling
    pass2_batch_size: int = Field(default=20, ge=1)
    module_split_threshold: int = Field(default=200, ge=1)
    module_max_funcs: int = Field(default=30, ge=1)

    # Inspection
    max_iterations: int = Field(default=3, ge=1)
    turn_budget: int = Field(default=40, ge=1)
    context_reserve: float = 0.2
    shared_memory_max_entries: int = Field(default=5, ge=0)
    shared_memory_entry_chars: int = Field(default=600, ge=32)

    # Verification
    poc_max_attempts: int = Field(default=3, ge=1)
    sandbox_mode: Literal["container", "fake", "off"] = "container"
    sandbox_image: str = "python:3.11-slim"
    sandbox_timeout_s: float = 120.0
    sandbox_memory_mb: int = 1024
    verify_concurrency: int = Field(default=4, ge=1)

    @field_validator("tau_m", "keep_threshold", "context_reserve", "top_p", "temperature")
    @classmethod
    def _unit_interval(cls, value: float) -> float:
        if not 0.0 <= value <= 1.0:
            raise ValueError("must be within [0, 1]")
        return value

    @property
    def request_budget(self) -> int:
        """Token budget for one request, leaving the configured reserve free"""
        return int(self.context_window * (1.0 - self.context_reserve))


def _env_overrides() -> Dict[str, Any]:
    """Collect REFAUDIT_* environment variables that name RunConfig fields"""
    overrides = {}
    for name in RunConfig.model_fields:
        value = os.getenv(f"{ENV_PREFIX}{name.upper()}")
        if value is not None and value != "":
            overrides[name] = value
    return overrides


def load_run_config(config_path: Optional[Path] = None,
                    flag_overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Build the run configuration

    Precedence: flags > environment > config file > defaults

    Args:
        config_path: Optional JSON config file
        flag_overrides: Values given on the command line (None values are ignored)

    Returns:
        Validated RunConfig
    """
    merged: Dict[str, Any] = {"state_dir": settings.state_dir}

    if config_path is not None:
        try:
            file_values = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {config_path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {config_path} is not valid JSON: {e}")
        if not isinstance(file_values, dict):
            raise ConfigError(f"Config file {config_path} must hold a JSON object")
        merged.update(file_values)

    merged.update(_env_overrides())
    merged.update({k: v for k, v in (flag_overrides or {}).items() if v is not None})

    try:
        return RunConfig.model_validate(merged)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or "config"
        raise ConfigError(f"Invalid configuration value for {field}: {first['msg']}")


# Global configuration instance
settings = Settings()
