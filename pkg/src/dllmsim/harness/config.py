"""Flat ``key = value`` config files covering ServeConfig, HardwareProfile and CostModel."""

from __future__ import annotations

import dataclasses
import re
from pathlib import Path
from typing import Optional, Union

from ..core import ConfigError, HardwareProfile, ServeConfig
from ..simexec import CostModel

_UNITS = {"kib": 1 << 10, "mib": 1 << 20, "gib": 1 << 30, "tib": 1 << 40,
          "kb": 10**3, "mb": 10**6, "gb": 10**9, "tb": 10**12}
_SIZE = re.compile(r"^([0-9_]+(?:\.[0-9]+)?)\s*([kmgt]i?b)$", re.IGNORECASE)


def _defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
    return out


_SERVE = {k: v for k, v in _defaults(ServeConfig).items()}
_HW = _defaults(HardwareProfile)
_COST = _defaults(CostModel)
KNOWN_KEYS = sorted(set(_SERVE) | set(_HW) | set(_COST))


def _parse_value(key: str, text: str, default):
    t = text.strip()
    low = t.lower()
    if key == "refresh_interval":
        return None if low in ("none", "inf", "off", "") else int(t)
    if isinstance(default, bool):
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {t!r}")
    m = _SIZE.match(t)
    if m:
        value = float(m.group(1).replace("_", "")) * _UNITS[m.group(2).lower()]
        return int(value) if isinstance(default, int) else value
    if isinstance(default, int):
        return int(t.replace("_", ""))
    return float(t)


def parse_config(text: str) -> tuple:
    """Return ``(ServeConfig, CostModel)`` from config text; unknown keys are errors."""
    serve, hw, cost = {}, {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        for table, defaults in ((serve, _SERVE), (hw, _HW), (cost, _COST)):
            if key in defaults:
                try:
                    table[key] = _parse_value(key, value, defaults[key])
                except ValueError as exc:
                    raise ConfigError(f"line {lineno}: {key}: {exc}") from None
                break
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    try:
        cm = CostModel(**cost)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return ServeConfig(hw=HardwareProfile(**hw), **serve), cm


def load_config(path: Optional[Union[str, Path]]) -> tuple:
    if path is None:
        return ServeConfig(), CostModel()
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_config(cfg: ServeConfig, cm: Optional[CostModel] = None) -> str:
    lines = []
    for f in dataclasses.fields(ServeConfig):
        if f.name == "hw":
            continue
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {'none' if v is None else str(v).lower() if isinstance(v, bool) else v}")
    for f in dataclasses.fields(HardwareProfile):
        lines.append(f"{f.name} = {getattr(cfg.hw, f.name)}")
    for f in dataclasses.fields(CostModel):
        lines.append(f"{f.name} = {getattr(cm or CostModel(), f.name)}")
    return "\n".join(lines) + "\n"
