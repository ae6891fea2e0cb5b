"""INI-style run configuration with a fully-embedded default set.

Every tunable has a default here, so an empty (or absent) file is a valid
configuration.  Files may override any subset; unknown sections or keys and
values of the wrong type are rejected with the offending ``[section] key``
named.  The KLINE_CONFIG environment variable supplies a default file path
when the command line does not.
"""

from __future__ import annotations

import configparser
import copy
import os
from pathlib import Path
from typing import Any, Callable

from .core import Frequency
from .errors import ConfigError

__all__ = ["DEFAULTS", "default_config", "resolve_config_path", "load_config"]

_BOOL_STATES = {
    "1": True,
    "yes": True,
    "true": True,
    "on": True,
    "0": False,
    "no": False,
    "false": False,
    "off": False,
}


def _int(raw: str) -> int:
    return int(raw, 10)


def _float(raw: str) -> float:
    value = float(raw)
    if value != value:
        raise ValueError("nan is not a valid setting")
    return value


def _bool(raw: str) -> bool:
    try:
        return _BOOL_STATES[raw.strip().lower()]
    except KeyError:
        raise ValueError(f"expected a boolean, got {raw!r}") from None


def _str(raw: str) -> str:
    return raw.strip()


def _choice(*options: str) -> Callable[[str], str]:
    def parse(raw: str) -> str:
        value = raw.strip().lower()
        if value not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {raw!r}")
        return value

    return parse


_FREQ_LABELS = tuple(f.value for f in Frequency)

# section -> key -> (parser, default)
_SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "data": {
        "frequency": (_choice(*_FREQ_LABELS), "daily"),
        "window_length": (_int, 64),
        "stride": (_int, 16),
        "liquidity_epsilon": (_float, 0.0),
    },
    "tokenizer": {
        "preset": (_choice("full", "tiny"), "tiny"),
        "steps": (_int, 2000),
        "batch_size": (_int, 16),
        "peak_lr": (_float, 1e-3),
        "warmup_fraction": (_float, 0.1),
        "weight_decay": (_float, 0.01),
        "volume_dropout": (_float, 0.05),
        "seed": (_int, 0),
    },
    "model": {
        "preset": (_choice("tiny", "small", "base", "large"), "tiny"),
        "steps": (_int, 2000),
        "batch_size": (_int, 4),
        "peak_lr": (_float, 1e-3),
        "warmup_fraction": (_float, 0.1),
        "weight_decay": (_float, 0.01),
        "seed": (_int, 0),
    },
    "sampling": {
        "temperature": (_float, 0.6),
        "top_p": (_float, 0.90),
        "n_samples": (_int, 10),
        "horizon": (_int, 16),
        "seed": (_int, 0),
    },
    "backtest": {
        "top_k": (_int, 5),
        "max_trades_per_day": (_int, 2),
        "min_hold_days": (_int, 5),
        "cost_rate": (_float, 0.0015),
        "initial_cash": (_float, 1.0),
    },
    "evaluation": {
        "seed": (_int, 0),
        "epochs": (_int, 20),
    },
}

DEFAULTS: dict[str, dict[str, Any]] = {
    section: {key: default for key, (_, default) in keys.items()}
    for section, keys in _SCHEMA.items()
}


def default_config() -> dict[str, dict[str, Any]]:
    return copy.deepcopy(DEFAULTS)


def resolve_config_path(cli_path: str | None) -> Path | None:
    """Command-line path wins; otherwise KLINE_CONFIG; otherwise defaults only."""
    if cli_path is not None:
        return Path(cli_path)
    env = os.environ.get("KLINE_CONFIG")
    return Path(env) if env else None


def load_config(path: str | Path | None) -> dict[str, dict[str, Any]]:
    config = default_config()
    if path is None:
        return config
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with path.open() as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{path}: unknown config key [{section}] {key}")
            parse, _default = _SCHEMA[section][key]
            try:
                config[section][key] = parse(raw)
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for [{section}] {key}: {exc}") from exc
    return config
