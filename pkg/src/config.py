"""
Configuration management.
"""

import json
try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib
import zlib
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.errors import DataError


class LogLevel(str, Enum):
    """Log level options."""

    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"
    CRITICAL = "CRITICAL"


class ModelChoice(str, Enum):
    """Which learners a run trains and reports."""

    GBDT = "gbdt"
    QRF = "qrf"
    BOTH = "both"


class Settings(BaseSettings):
    """
    Process settings loaded from environment variables with validation.

    Attributes:
        log_level: Logging level
        threads: Default worker count for parallel training
        seed: Default master seed when a run config does not set one
        output_dir: Parent of each command's output directory when --out is omitted
    """

    log_level: LogLevel = Field(default=LogLevel.INFO)

    threads: int = Field(default=1, ge=1)
    seed: int = Field(default=20230501, ge=0)
    output_dir: str = Field(default="./runs")

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        env_prefix="QUANTMERGE_",
        extra="ignore",
    )


def derive_seed(master: int, component: str, index: int = 0) -> int:
    """
    Derive a component seed from the master seed.

    Args:
        master: Master seed of the run
        component: Component name, e.g. "folds" or "qrf"
        index: Position of the job inside the component

    Returns:
        A 63-bit seed that depends only on (master, component, index)
    """
    if master < 0 or index < 0:
        raise ValueError("master seed and index must be nonnegative")
    key = [int(master), zlib.crc32(component.encode("utf-8")), int(index)]
    state = np.random.SeedSequence(key).generate_state(1, dtype=np.uint64)[0]
    return int(state >> np.uint64(1))


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Read a run configuration file.

    TOML and JSON are accepted. A run manifest is a JSON file whose
    ``config`` block holds the configuration it was produced with.

    Args:
        path: Path to a ``.toml`` or ``.json`` file

    Returns:
        Raw configuration mapping
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")

    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix.lower() == ".json":
            raw = json.loads(text)
        else:
            raw = tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise DataError(f"Cannot parse config file {path}: {e}") from e

    if not isinstance(raw, dict):
        raise DataError(f"Config file {path} must hold a mapping")
    if "manifest_version" in raw and "config" in raw:
        return raw["config"]
    return raw


# Create global settings instance
settings = Settings()
