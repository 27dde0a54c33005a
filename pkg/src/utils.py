"""
Utility module for the MARS detailization toolkit.

Provides configuration loading with validation against the built-in
defaults, structured logging setup, atomic file output and a few
formatting helpers used by the reports.
"""

from __future__ import annotations

import copy
import logging
import os
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import IO, Any, Iterator

import yaml

from src.errors import ConfigError

DEFAULT_CONFIG: dict[str, dict[str, Any]] = {
    "schedule": {
        "points_per_lod": [64, 256, 1024, 4096],
        "latents_per_lod": [8, 32, 128, 512],
        "feature_dim": 128,
    },
    "vqvae": {
        "codebook_size": 512,
        "pe_bands": 8,
        "heads": 4,
        "encoder_self_blocks": 4,
        "decoder_self_blocks": 4,
        "ff_mult": 2,
        "head_hidden": 128,
        "commitment_weight": 0.25,
        "lod_weights": None,
        "ema_decay": 0.99,
        "dead_code_steps": 200,
        "downsampling": "fps",
        "seed": 0,
    },
    "ar": {
        "width": 192,
        "depth": 6,
        "heads": 6,
        "ff_mult": 4,
        "seed": 0,
    },
    "train_vqvae": {
        "steps": 2000,
        "batch_size": 2,
        "lr": 1e-3,
        "seed": 0,
        "q_uniform": 1024,
        "q_near": 1024,
        "surface_sigma": 0.01,
        "variants_per_shape": 2,
        "include_coarse": True,
        "checkpoint_every": 500,
        "log_every": 50,
        "precision": "float32",
    },
    "train_ar": {
        "steps": 3000,
        "batch_size": 4,
        "lr": 3e-4,
        "seed": 0,
        "tokenize_seed": 0,
        "checkpoint_every": 1000,
        "log_every": 100,
        "precision": "float32",
    },
    "sampler": {
        "temperature": 1.0,
        "top_k": 64,
        "seed": 0,
        "greedy": False,
        "condition_lods": None,
    },
    "data": {
        "shapes": 8,
        "seed": 0,
        "subdivisions": 20,
    },
    "eval": {
        "resolution": 32,
        "tau": 0.02,
        "samples": 10000,
        "seed": 0,
        "lattice": 64,
    },
    "logging": {
        "level": "INFO",
        "format": "%(asctime)s | %(levelname)-8s | %(name)s | %(message)s",
        "date_format": "%Y-%m-%d %H:%M:%S",
    },
}


def default_config() -> dict[str, dict[str, Any]]:
    """Return a deep copy of the built-in defaults."""
    return copy.deepcopy(DEFAULT_CONFIG)


def load_config(config_path: str | Path | None = None) -> dict[str, dict[str, Any]]:
    """Load a YAML configuration file and merge it onto the defaults.

    Args:
        config_path: Path to a YAML file whose sections mirror
            ``DEFAULT_CONFIG``. ``None`` returns the defaults.

    Returns:
        The merged configuration dictionary.

    Raises:
        FileNotFoundError: If the config file does not exist.
        ConfigError: If the file has an unknown section or key.
    """
    config = default_config()
    if config_path is None:
        return config

    path = Path(config_path)
    if not path.exists():
        raise FileNotFoundError(f"Configuration file not found: {path.resolve()}")

    with open(path, "r", encoding="utf-8") as f:
        loaded = yaml.safe_load(f) or {}

    merge_config(config, loaded)
    return config


def merge_config(config: dict[str, dict[str, Any]], overrides: dict[str, Any]) -> dict[str, dict[str, Any]]:
    """Apply ``overrides`` onto ``config`` in place after validating keys.

    Raises:
        ConfigError: On an unknown section or key (message names it).
    """
    if not isinstance(overrides, dict):
        raise ConfigError("Configuration root must be a mapping of sections")
    _validate_config(overrides)
    for section, values in overrides.items():
        config[section].update(values or {})
    return config


def _validate_config(config: dict[str, Any]) -> None:
    """Reject sections and keys that the defaults do not declare.

    Args:
        config: Parsed (partial) configuration.

    Raises:
        ConfigError: Naming the first unknown ``section`` or ``section.key``.
    """
    for section, values in config.items():
        if section not in DEFAULT_CONFIG:
            raise ConfigError(f"Unknown config section: '{section}'")
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"Config section '{section}' must be a mapping")
        for key in values:
            if key not in DEFAULT_CONFIG[section]:
                raise ConfigError(f"Unknown config key: '{section}.{key}'")


def dump_config(config: dict[str, Any]) -> str:
    """Render a configuration as YAML text (sections in default order)."""
    return yaml.safe_dump(config, sort_keys=False, default_flow_style=None)


def setup_logging(config: dict[str, Any], quiet: bool = False) -> logging.Logger:
    """Configure structured logging for the application.

    Sets up the ``mars`` logger with formatted output on standard error,
    leaving standard output to machine-readable results. The log level,
    format, and date format are read from config.

    Args:
        config: The full application configuration dictionary.
        quiet: Raise the level to WARNING regardless of config.

    Returns:
        A configured Logger instance for the toolkit.
    """
    log_config = config.get("logging", {})
    log_level = getattr(logging, str(log_config.get("level", "INFO")).upper(), logging.INFO)
    if quiet:
        log_level = max(log_level, logging.WARNING)
    log_format = log_config.get(
        "format",
        "%(asctime)s | %(levelname)-8s | %(name)s | %(message)s",
    )
    date_format = log_config.get("date_format", "%Y-%m-%d %H:%M:%S")

    # Clear existing handlers to avoid duplicate output on re-runs
    logger = logging.getLogger("mars")
    logger.handlers.clear()

    handler = logging.StreamHandler(sys.stderr)
    handler.setLevel(log_level)
    handler.setFormatter(logging.Formatter(fmt=log_format, datefmt=date_format))

    logger.setLevel(log_level)
    logger.addHandler(handler)
    logger.propagate = False

    return logger


@contextmanager
def atomic_write(path: str | Path, mode: str = "w") -> Iterator[IO[Any]]:
    """Write to a temporary sibling file and rename it over ``path`` on success.

    A failure inside the block removes the temporary file, so the target is
    either fully written or untouched.
    """
    target = Path(path)
    if not target.parent.exists():
        raise FileNotFoundError(f"Output directory does not exist: {target.parent.resolve()}")
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
    encoding = None if "b" in mode else "utf-8"
    try:
        with os.fdopen(fd, mode, encoding=encoding) as f:
            yield f
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def format_ratio(value: float) -> str:
    """Format a [0, 1] metric with three decimals (e.g. 0.7851 → '0.785')."""
    return f"{value:.3f}"


def format_duration(seconds: float) -> str:
    """Format a duration as '1m 05s' or '4.2s'."""
    if seconds < 60:
        return f"{seconds:.1f}s"
    minutes, rest = divmod(int(round(seconds)), 60)
    return f"{minutes}m {rest:02d}s"
