"""YAML configuration files for encoders.

A file either describes an encoder from scratch or names a compiled-in
preset under ``base`` and overrides individual fields::

    base: effconf-ctc-s
    name: wide-stage-3
    stages:
      - {}
      - {}
      - {dim: 256, att_group_size: 1}

Stage entries override the base stage at the same position. Unknown keys
anywhere are errors.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Mapping

import yaml

from .encoder import EncoderConfig, StageConfig, get_preset
from .errors import ConfigError

TOP_LEVEL_KEYS = frozenset(f.name for f in dataclasses.fields(EncoderConfig)) | {"base"}
STAGE_KEYS = frozenset(f.name for f in dataclasses.fields(StageConfig))


def _check_keys(mapping: Mapping, allowed: frozenset, where: str) -> None:
    if not isinstance(mapping, Mapping):
        raise ConfigError(f"{where} must be a mapping, got {type(mapping).__name__}")
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(map(str, unknown))}; "
                          f"allowed: {', '.join(sorted(allowed))}")


def _stage(entry: Mapping, base: StageConfig | None, where: str) -> StageConfig:
    _check_keys(entry, STAGE_KEYS, where)
    try:
        if base is not None:
            return dataclasses.replace(base, **entry)
        return StageConfig(**entry)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data: Mapping[str, Any]) -> EncoderConfig:
    """Build an :class:`EncoderConfig` from parsed YAML/JSON."""
    if data is None:
        data = {}
    _check_keys(data, TOP_LEVEL_KEYS, "config")
    data = dict(data)
    base_name = data.pop("base", None)
    base = get_preset(base_name) if base_name is not None else None
    stage_entries = data.pop("stages", None)

    if stage_entries is None:
        if base is None:
            raise ConfigError("config without 'base' must list its stages")
        stages = base.stages
    else:
        if not isinstance(stage_entries, list) or not stage_entries:
            raise ConfigError("'stages' must be a non-empty list")
        if base is not None and len(stage_entries) != len(base.stages):
            raise ConfigError(f"base {base_name!r} has {len(base.stages)} stages; "
                              f"the override lists {len(stage_entries)}")
        stages = tuple(
            _stage(entry or {}, base.stages[i] if base is not None else None, f"stages[{i}]")
            for i, entry in enumerate(stage_entries)
        )
    overridden = bool(data) or stage_entries is not None
    data["stages"] = stages
    if base is not None and "name" not in data and overridden:
        data["name"] = f"{base.name}+file"
    try:
        if base is not None:
            return dataclasses.replace(base, **data)
        return EncoderConfig(**data)
    except TypeError as exc:
        raise ConfigError(f"config: {exc}") from None


def config_to_dict(config: EncoderConfig) -> dict[str, Any]:
    """Plain-data form that :func:`config_from_dict` maps back to an equal config."""
    out = dataclasses.asdict(config)
    out["stages"] = [dict(s) for s in out["stages"]]
    return out


def load_config(path: str | Path) -> EncoderConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}") from None
    return config_from_dict(data)


def dump_config(config: EncoderConfig) -> str:
    return yaml.safe_dump(config_to_dict(config), sort_keys=False)
