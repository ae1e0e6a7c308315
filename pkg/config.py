"""
Run configuration loading
Precedence: dataclass defaults < JSON file < MLVTG_* environment variables < explicit overrides
"""

import json
import logging
import os
from dataclasses import fields
from typing import Any, Dict, Mapping, Optional

from dotenv import load_dotenv

from exceptions import ValidationError
from models import RunConfig
from tools.container import atomic_write_bytes

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

ENV_PREFIX = "MLVTG_"
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, raw: str, default: Any) -> Any:
    try:
        if isinstance(default, bool):
            lowered = raw.strip().lower()
            if lowered not in _TRUE | _FALSE:
                raise ValueError(raw)
            return lowered in _TRUE
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ValidationError(f"Cannot read {ENV_PREFIX}{name.upper()}={raw!r} as {type(default).__name__}") from exc
    return raw


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """RunConfig values named by MLVTG_<FIELD> variables"""
    environ = os.environ if environ is None else environ
    defaults = RunConfig()
    values = {}
    for item in fields(RunConfig):
        key = f"{ENV_PREFIX}{item.name.upper()}"
        if key in environ:
            values[item.name] = _coerce(item.name, environ[key], getattr(defaults, item.name))
    return values


def read_config_file(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as stream:
            values = json.load(stream)
    except FileNotFoundError as exc:
        raise ValidationError(f"Config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"Config file {path} is not valid JSON: {exc.msg} (line {exc.lineno})") from exc
    if not isinstance(values, dict):
        raise ValidationError(f"Config file {path} must hold a JSON object")
    return values


def load_run_config(
    path: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """
    Resolve the run configuration

    Args:
        path: Optional JSON file with RunConfig fields
        overrides: Values from command-line flags; None entries are ignored
        environ: Environment mapping (defaults to os.environ)

    Returns:
        Validated RunConfig
    """
    values: Dict[str, Any] = {}
    if path:
        values.update(read_config_file(path))
    values.update(env_overrides(environ))
    values.update({key: value for key, value in (overrides or {}).items() if value is not None})

    config = RunConfig.from_dict(values)
    logger.debug(f"Resolved run config: {config.to_dict()}")
    return config


def save_run_config(config: RunConfig, path: str) -> None:
    atomic_write_bytes(path, (json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n").encode("utf-8"))


def log_level_from_env(default: str = "INFO") -> str:
    return os.getenv(f"{ENV_PREFIX}LOG_LEVEL", default).upper()
