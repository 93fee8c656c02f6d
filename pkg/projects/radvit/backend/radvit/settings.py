"""
Environment configuration.

Defaults come from the variables.env block of project_configuration.yaml,
values exported in the environment take precedence.
"""
import os
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Optional

import yaml
from loguru import logger as log

PROJECT_CONFIGURATION = Path(__file__).resolve().parents[2].joinpath(
    "project_configuration.yaml"
)


@lru_cache(maxsize=1)
def _defaults() -> Dict[str, str]:

    if not PROJECT_CONFIGURATION.exists():
        log.debug("No project configuration found in {}", PROJECT_CONFIGURATION)
        return {}

    with open(PROJECT_CONFIGURATION) as f:
        conf = yaml.safe_load(f) or {}

    variables = conf.get("variables", {}).get("env", {}) or {}
    return {k: "" if v is None else str(v) for k, v in variables.items()}


def get(var: str, default: Optional[str] = None) -> Optional[str]:
    value = os.environ.get(var)
    if value is not None:
        return value
    return _defaults().get(var, default)


def to_bool(var: Any, default: bool = False) -> bool:

    if var is None or var == "":
        return default

    if isinstance(var, bool):
        return var

    if isinstance(var, int):
        return var != 0

    return str(var).lower() in ("1", "true", "yes", "on")


def to_int(var: Any, default: int = 0) -> int:

    if var is None or var == "":
        return default

    try:
        return int(var)
    except (TypeError, ValueError):
        log.warning("Invalid integer value: {}, using default {}", var, default)
        return default


def load_variables_group(prefix: str) -> Dict[str, str]:
    """
    Return all variables starting with PREFIX_, keyed by the lowercase suffix
    e.g. RADVIT_OUTPUT_ROOT -> output_root
    """

    prefix = f"{prefix.upper()}_"
    variables: Dict[str, str] = {}

    keys = set(_defaults().keys()) | set(os.environ.keys())
    for key in sorted(keys):
        if not key.startswith(prefix):
            continue
        value = get(key)
        if value is None:  # pragma: no cover
            continue
        variables[key[len(prefix) :].lower()] = value

    return variables


radvit_vars = load_variables_group(prefix="radvit")

OUTPUT_ROOT = Path(radvit_vars.get("output_root") or "runs")
LOG_LEVEL = radvit_vars.get("log_level") or "INFO"
DEVICE = radvit_vars.get("device") or "cpu"
NUM_THREADS = to_int(radvit_vars.get("num_threads"), 0)
CHECKPOINT_EVERY = to_int(radvit_vars.get("checkpoint_every"), 500)
