"""Flat ``key = value`` configuration with flag overrides.

Every key maps 1:1 to a ``--key`` flag (underscores become dashes). Flags win
over file values, and the effective configuration is written back in the same
syntax so a run can be reproduced from it.
"""

import logging
import re
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Tuple, Union

logger = logging.getLogger(__name__)

# "#" opens a comment at line start or after whitespace; "a#b" is a plain value
COMMENT = re.compile(r"(?:^|\s)#.*$")


class ConfigError(ValueError):
    """Invalid configuration: unknown key, bad value or violated invariant."""


def _int_list(value: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in value.split(",") if v.strip())


def _float_list(value: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in value.split(",") if v.strip())


def _str_list(value: str) -> Tuple[str, ...]:
    return tuple(v.strip() for v in value.split(",") if v.strip())


def _bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


# key -> parser; every key is also a --flag
KEYS: Dict[str, Callable[[str], Any]] = {
    # training
    "t0": int,
    "epochs": int,
    "beta": float,
    "mode": str,
    "rep_mode": str,
    "lr": float,
    "batch_size": int,
    "dropout": float,
    "embed_dim": int,
    "hidden_dim": int,
    "seed": int,
    "eval_every": int,
    "record_epochs": _int_list,
    # data
    "train": str,
    "train_format": str,
    "validation": str,
    "validation_format": str,
    "validation_fraction": float,
    "test": str,
    "test_format": str,
    "min_freq": int,
    "embeddings": str,
    "data_seed": int,
    # noise
    "noise": str,
    "level": float,
    "tokens": _str_list,
    "match": str,
    "noise_seed": int,
    # inject and fit-bmm inputs
    "input": str,
    "format": str,
    "validation_output": str,
    "losses": str,
    # outputs and sweeps
    "output": str,
    "grid_t0": _int_list,
    "grid_beta": _float_list,
    "workers": int,
}

PathLike = Union[str, Path]


def read_config_file(path: PathLike) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` at line start or after whitespace starts a comment.

    Raises:
        ConfigError: On a line without ``=``, an unknown key or a duplicate key
    """
    values: Dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = COMMENT.sub("", line.rstrip("\n")).strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or not key:
                raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
            if key not in KEYS:
                raise ConfigError(f"{path}: line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{path}: line {lineno}: duplicate key {key!r}")
            values[key] = value.strip()
    return values


def resolve(
    file_values: Mapping[str, str], flag_values: Optional[Mapping[str, Any]] = None
) -> Dict[str, Any]:
    """Merge file values with flag overrides and coerce them to typed values.

    Raises:
        ConfigError: On unknown keys or values that fail to parse
    """
    merged: Dict[str, Any] = dict(file_values)
    for key, value in (flag_values or {}).items():
        if value is not None:
            merged[key] = value

    resolved: Dict[str, Any] = {}
    for key, value in merged.items():
        if key not in KEYS:
            raise ConfigError(f"unknown configuration key {key!r}")
        if not isinstance(value, str):
            resolved[key] = value
            continue
        try:
            resolved[key] = KEYS[key](value)
        except ValueError as e:
            raise ConfigError(f"invalid value for {key}: {value!r} ({e})") from None
    return resolved


def format_value(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_resolved_config(values: Mapping[str, Any], path: PathLike) -> None:
    """Write the effective configuration, sorted by key, in ``key = value`` syntax.

    Raises:
        ConfigError: If a value would read back as a comment
    """
    lines = []
    for key in sorted(values):
        line = f"{key} = {format_value(values[key])}"
        if COMMENT.search(line):
            raise ConfigError(
                f"value of {key!r} has '#' at its start or after whitespace and would read back as a comment"
            )
        lines.append(line)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.debug("Wrote resolved configuration to %s", path)


def require(values: Mapping[str, Any], *keys: str) -> None:
    """Raise ConfigError naming the flags of any missing keys."""
    missing = [key for key in keys if values.get(key) in (None, "", ())]
    if missing:
        flags = ", ".join(f"--{key.replace('_', '-')}" for key in missing)
        raise ConfigError(f"missing required setting(s): {flags}")
