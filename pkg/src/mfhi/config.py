"""Run configuration: INI-style files, flag overrides and the config digest.

A config file has one section per command (``[gen]``, ``[train]``, ``[eval]``,
``[sweep]``, ``[dump-attention]``) holding ``key = value`` lines.  Unknown
sections and keys are errors.  Values are typed from the defaults of the
dataclass a section feeds.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from pathlib import Path
from typing import Optional

from .dataset import ConfigurationError

SEED_ENV = "MFHI_SEED"

# keys accepted by the sections that are not backed by a dataclass
PLAIN_SECTIONS = {
    "eval": {"top": str},
    "sweep": {"grid": str, "seeds": str},
    "dump-attention": {},
}
DATACLASS_SECTIONS = ("gen", "train")


def canonical_json(values: dict) -> str:
    return json.dumps(values, sort_keys=True, separators=(",", ":"))


def config_hash(values: dict) -> str:
    """Stable 16-hex-digit digest of a settings dict (key order irrelevant)."""
    return hashlib.sha256(canonical_json(values).encode("utf-8")).hexdigest()[:16]


def read_config(path) -> dict:
    """Parse a config file into ``{section: {key: raw string}}``."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str  # keys are case-sensitive
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise OSError(f"cannot read config {path}: {err.strerror or err}") from err
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as err:
        raise ConfigurationError(f"{path}: {err}") from None
    known = set(DATACLASS_SECTIONS) | set(PLAIN_SECTIONS)
    out = {}
    for section in parser.sections():
        if section not in known:
            raise ConfigurationError(f"{path}: unknown section [{section}]; expected one of {sorted(known)}")
        out[section] = dict(parser.items(section))
    return out


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def coerce(value, kind):
    if not isinstance(value, str):
        return kind(value)
    if kind is bool:
        return _parse_bool(value)
    return kind(value.strip())


def dataclass_values(cls, raw: dict, section: str) -> dict:
    """Type the raw strings of ``raw`` by the defaults of ``cls``; unknown keys are errors."""
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigurationError(f"[{section}] unknown keys {unknown}; allowed: {sorted(defaults)}")
    typed = {}
    for key, value in raw.items():
        try:
            typed[key] = coerce(value, type(defaults[key]))
        except ValueError as err:
            raise ConfigurationError(f"[{section}] {key}: {err}") from None
    return typed


def plain_values(section: str, raw: dict) -> dict:
    allowed = PLAIN_SECTIONS[section]
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigurationError(f"[{section}] unknown keys {unknown}; allowed: {sorted(allowed)}")
    return {k: allowed[k](v) for k, v in raw.items()}


def env_seed() -> Optional[int]:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def resolve(cls, section: str, file_values: Optional[dict], overrides: dict):
    """Build ``cls`` from defaults < config file < ``MFHI_SEED`` < flags.

    ``overrides`` holds flag values; entries that are ``None`` were not given.
    """
    values = dataclass_values(cls, (file_values or {}).get(section, {}), section)
    seed = env_seed()
    if seed is not None:
        values["seed"] = seed
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**values)
    except (TypeError, ValueError) as err:
        raise ConfigurationError(f"[{section}] {err}") from None
