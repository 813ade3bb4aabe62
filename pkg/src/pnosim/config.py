"""INI configuration: one section per component, keys named after config fields.

[dma] uses the short names ``ordering`` and ``seed`` for completion ordering
and the engine RNG seed. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing

from .bench import WorkloadConfig
from .bridge import BridgeConfig
from .netsim import LinkConfig
from .proxy import ProxyConfig
from .rings import RingConfig
from .simdma import DmaConfig
from .tcp import TcpConfig
from .testbed import CostModel, SimConfig


class ConfigError(ValueError):
    pass


SECTIONS = {
    "dma": DmaConfig, "link": LinkConfig, "tcp": TcpConfig, "rings": RingConfig,
    "bridge": BridgeConfig, "proxy": ProxyConfig, "cost": CostModel, "workload": WorkloadConfig,
}
ALIASES = {("dma", "ordering"): "completion_ordering", ("dma", "seed"): "rng_seed"}


def _convert(section: str, key: str, raw: str, hint):
    text = raw.strip()
    hint_s = str(hint)
    try:
        if "tuple" in hint_s:
            return tuple(int(x) for x in text.split(",") if x.strip())
        if hint_s.startswith("bool") or hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if "None" in hint_s and text.lower() in ("", "none"):
            return None
        if hint_s.startswith("int") or hint is int:
            return int(text, 0)
        if hint_s.startswith("float") or hint is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {hint_s}") from None
    return text


def parse_sections(parser: configparser.ConfigParser) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for section in parser.sections():
        cls = SECTIONS.get(section)
        if cls is None:
            raise ConfigError(f"unknown section [{section}]")
        hints = typing.get_type_hints(cls)
        names = {f.name for f in dataclasses.fields(cls)}
        values = {}
        for key, raw in parser.items(section):
            name = ALIASES.get((section, key), key)
            if name not in names:
                raise ConfigError(f"unknown key {section}.{key}")
            values[name] = _convert(section, key, raw, hints[name])
        out[section] = values
    return out


def load(path=None, text: str | None = None, overrides: dict | None = None) -> tuple[SimConfig, WorkloadConfig]:
    """Build the simulation and workload configs from an INI file or string.

    ``overrides`` maps ``section`` to field values applied on top.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        if path is not None:
            with open(path) as fh:
                parser.read_file(fh)
        if text is not None:
            parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    sections = parse_sections(parser)
    for section, values in (overrides or {}).items():
        sections.setdefault(section, {}).update(values)
    try:
        wl = WorkloadConfig(**sections.get("workload", {}))
        base = SimConfig()
        built = {name: cls(**{**dataclasses.asdict(getattr(base, name)), **sections.get(name, {})})
                 for name, cls in SECTIONS.items() if name != "workload"}
        sim = SimConfig(cores=wl.cores, **built)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return sim, wl
