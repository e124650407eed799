"""Flat ``section.key=value`` configuration files.

Blank lines and ``#`` comments are ignored.  Values stay strings here and
are coerced by whichever component consumes their section.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List

from .errors import ContractError

SECTIONS = ("data", "train", "seg", "run")


class ConfigError(ContractError):
    """Malformed or inconsistent configuration (a usage error)."""


@dataclass
class RunConfig:
    data: Dict[str, str] = field(default_factory=dict)
    train: Dict[str, str] = field(default_factory=dict)
    seg: Dict[str, str] = field(default_factory=dict)
    run: Dict[str, str] = field(default_factory=dict)

    def set(self, dotted: str, value: str) -> None:
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"config key {dotted!r} must look like <{'|'.join(SECTIONS)}>.<name>")
        getattr(self, section)[key] = value

    def get(self, dotted: str, default=None):
        section, _, key = dotted.partition(".")
        return getattr(self, section).get(key, default)

    def to_text(self) -> str:
        lines = []
        for section in SECTIONS:
            for key in sorted(getattr(self, section)):
                lines.append(f"{section}.{key}={getattr(self, section)[key]}")
        return "\n".join(lines) + "\n"

    def snapshot(self) -> Dict[str, Dict[str, str]]:
        return {s: dict(sorted(getattr(self, s).items())) for s in SECTIONS}


def parse_config(text: str, origin: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {raw.strip()!r}")
        try:
            cfg.set(key.strip(), value.strip())
        except ConfigError as exc:
            raise ConfigError(f"{origin}:{lineno}: {exc}") from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def apply_overrides(cfg: RunConfig, pairs: Iterable[str]) -> RunConfig:
    """Apply ``key=value`` strings on top of ``cfg`` (in place)."""
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"override {pair!r} must be key=value")
        cfg.set(key.strip(), value.strip())
    return cfg


def parse_list(value: str) -> List[str]:
    return [v.strip() for v in value.replace("[", "").replace("]", "").split(",") if v.strip()]
