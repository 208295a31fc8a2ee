"""
Run configuration using pydantic-settings.

Values come, highest priority first, from command-line overrides, the
TOML config file, ``PERMUTE_``-prefixed environment variables (nested
with ``__``, e.g. ``PERMUTE_ATTACK__SEED``), a .env file and the field
defaults.
"""

import os

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.errors import ConfigError
from app.models.attack import AttackConfig
from app.models.forest import ForestParams
from app.models.schema import FeatureKind
from app.models.scorecard import ScorecardConfig

CONFIG_ENV_VAR = "PERMUTE_CONFIG"


class RunConfig(BaseSettings):
    """Everything a command needs to reproduce its output."""

    model_config = SettingsConfigDict(
        env_prefix="PERMUTE_",
        env_nested_delimiter="__",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Data
    data_path: Optional[Path] = None
    target_column: Optional[str] = None
    delimiter: str = ","
    ordinal_threshold: int = Field(default=12, ge=1)
    kind_overrides: Dict[str, FeatureKind] = Field(default_factory=dict)
    immutable_features: List[str] = Field(default_factory=list)
    split_fraction: float = Field(default=0.6, gt=0, lt=1)
    split_seed: int = 0

    # Model backend: the built-in forest unless an external command is given
    forest: ForestParams = Field(default_factory=ForestParams)
    external_command: Optional[List[str]] = None
    external_timeout: float = Field(default=30.0, gt=0)

    attack: AttackConfig = Field(default_factory=AttackConfig)
    scorecard: ScorecardConfig = Field(default_factory=ScorecardConfig)
    default_class: int = Field(default=1, ge=0, description="Class whose probability is the PD")

    # Application settings
    output_dir: Path = Path("runs")
    workers: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)
    log_level: str = "INFO"
    app_name: str = "PermuteAttack"
    app_version: str = "0.1.0"

    @property
    def uses_external_model(self) -> bool:
        return bool(self.external_command)

    def echo(self) -> Dict[str, Any]:
        """JSON-safe copy stored in every output envelope."""
        return self.model_dump(mode="json")


def _deep_merge(base: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with path.open("rb") as handle:
            return tomllib.load(handle)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc


def load_run_config(path: Optional[Union[str, Path]] = None, **overrides: Any) -> RunConfig:
    """
    Build a RunConfig from an optional TOML file plus overrides.

    Nested overrides (``attack={"seed": 3}``) are merged into the file's
    sections rather than replacing them.

    Raises:
        ConfigError: unreadable file or invalid values.
    """
    values = read_config_file(path) if path is not None else {}
    values = _deep_merge(values, {k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**values)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


@lru_cache
def get_settings() -> RunConfig:
    """
    Cached configuration for the HTTP service.

    Reads the TOML file named by ``PERMUTE_CONFIG`` when it is set.
    """
    return load_run_config(os.environ.get(CONFIG_ENV_VAR))
