"""Flat ``key = value`` config files with optional repeated ``[section]`` blocks.

    # comment
    seed = 7
    [observation]
    kind = masking
    y = obs/mask.y.aodf
    [observation]
    kind = downsample
    ...

Keys before the first section header are global settings. Values are kept as
strings; callers convert and validate them against a schema.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass
class ParsedConfig:
    settings: dict[str, str] = field(default_factory=dict)
    blocks: list[tuple[str, dict[str, str]]] = field(default_factory=list)

    def sections(self, name: str) -> list[dict[str, str]]:
        return [b for n, b in self.blocks if n == name]


def parse_config(text: str, source: str = "<config>") -> ParsedConfig:
    cfg = ParsedConfig()
    current = cfg.settings
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise ConfigError(f"{source}:{lineno}: empty section name")
            current = {}
            cfg.blocks.append((name, current))
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: missing key")
        if key in current:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        current[key] = value
    return cfg


def parse_flat(text: str, source: str = "<config>") -> dict[str, str]:
    cfg = parse_config(text, source)
    if cfg.blocks:
        raise ConfigError(f"{source}: sections are not allowed here")
    return cfg.settings


def parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def format_config(settings: dict, blocks=()) -> str:
    """Inverse of :func:`parse_config` (keys sorted for byte-stable output)."""
    lines = [f"{k} = {settings[k]}" for k in sorted(settings)]
    for name, block in blocks:
        lines.append(f"[{name}]")
        lines += [f"{k} = {block[k]}" for k in sorted(block)]
    return "\n".join(lines) + "\n"
