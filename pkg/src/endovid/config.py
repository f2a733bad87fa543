"""Run configuration: flat namespaced keys over the section dataclasses.

A config file is plain text, one ``section.field = value`` per line, ``#``
comments allowed. Every field has a default; CLI flags override file values.
The resolved snapshot written at run start parses back to the identical
configuration.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from .model import ModelConfig
from .views import ViewConfig
from .distill import DistillConfig
from .probe import ProbeConfig


class ConfigError(ValueError):
    """Bad config file or override; maps to CLI exit code 2."""


@dataclass
class DataConfig:
    dataset_dir: str = "data/synthetic"
    out_dir: str = "runs/default"


@dataclass
class RunSection:
    seed: int = 0
    lr: float = 2e-5
    weight_decay: float = 4e-2
    max_steps: int = 0              # 0 means run the full epoch budget
    checkpoint_every: int = 0       # 0 disables periodic checkpoints
    log_every: int = 10


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    views: ViewConfig = field(default_factory=ViewConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunSection = field(default_factory=RunSection)


_SECTIONS = ("model", "distill", "views", "probe", "data", "run")


def _parse_value(raw: str, typ: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if typ == Tuple[int, ...]:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if typ == Tuple[float, float]:
            parts = [float(v) for v in raw.split(",") if v.strip()]
            if len(parts) != 2:
                raise ValueError("expected two comma-separated floats")
            return (parts[0], parts[1])
        if typ == Tuple[float, float, float, float]:
            parts = [float(v) for v in raw.split(",") if v.strip()]
            if len(parts) != 4:
                raise ValueError("expected four comma-separated floats")
            return tuple(parts)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    raise ConfigError(f"{key}: unsupported field type {typ}")


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _field_types() -> Dict[str, Any]:
    types: Dict[str, Any] = {}
    defaults = RunConfig()
    for section in _SECTIONS:
        sub = getattr(defaults, section)
        # resolve string annotations against the defining dataclass
        hints = {f.name: f.type for f in fields(sub)}
        resolved = typing.get_type_hints(type(sub))
        for name in hints:
            types[f"{section}.{name}"] = resolved.get(name, hints[name])
    return types


def parse_overrides(pairs: Dict[str, str]) -> Dict[str, Any]:
    """Typed values from raw ``section.field -> string`` pairs."""
    types = _field_types()
    out = {}
    for key, raw in pairs.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _parse_value(raw, types[key], key)
    return out


def load_config_file(path: Path) -> Dict[str, str]:
    """Raw key/value pairs from a flat config file."""
    pairs: Dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        pairs[key.strip()] = raw.strip()
    return pairs


def build_config(file_path: Optional[Path] = None,
                 overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    """Defaults, then file values, then override flags; validated on build."""
    values: Dict[str, Any] = {}
    if file_path is not None:
        values.update(parse_overrides(load_config_file(file_path)))
    if overrides:
        values.update(parse_overrides(overrides))

    sections: Dict[str, Dict[str, Any]] = {s: {} for s in _SECTIONS}
    for key, val in values.items():
        section, _, name = key.partition(".")
        sections[section][name] = val
    try:
        return RunConfig(
            model=ModelConfig(**sections["model"]),
            distill=DistillConfig(**sections["distill"]),
            views=ViewConfig(**sections["views"]),
            probe=ProbeConfig(**sections["probe"]),
            data=DataConfig(**sections["data"]),
            run=RunSection(**sections["run"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: RunConfig) -> str:
    """Snapshot text that parses back to an identical configuration."""
    lines = []
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        for f in dataclasses.fields(sub):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"
