"""Harness configuration file loading.

The format is TOML. Addresses and scheme parameters may be given as strings
holding hexadecimal literals, since TOML integers are signed 64-bit and the
fault namespace lives above 2**63. See ``selfdbg/data/default.toml``.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..codec import CodecConfig, CodecScheme, FaultNamespace, SchemeKind, default_codec_config
from ..domain import FaultKind
from ..sim import Scenario, scenario_from_mapping


class ConfigError(ValueError):
    pass


def parse_int(value: Any) -> int:
    if isinstance(value, bool):
        raise ConfigError(f"expected an integer, got {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        try:
            return int(value, 0)
        except ValueError:
            pass
    raise ConfigError(f"expected an integer or hex literal, got {value!r}")


@dataclass
class Timeouts:
    probe: float = 2.0
    handshake: float = 5.0
    scenario: float = 15.0
    exit_kill: float = 1.0
    deadlock_hold: float = 0.5


@dataclass
class BenchOptions:
    warmup: int = 10
    switch_samples: int = 200
    remote_samples: int = 200
    init_samples: int = 30


@dataclass
class HarnessConfig:
    codec: CodecConfig = field(default_factory=default_codec_config)
    timeouts: Timeouts = field(default_factory=Timeouts)
    bench: BenchOptions = field(default_factory=BenchOptions)
    demo_inputs: int = 100
    demo_seed: int = 1
    scenarios: dict[str, Scenario] = field(default_factory=dict)
    source: str = "<defaults>"


def _codec(raw: Mapping) -> CodecConfig:
    base = default_codec_config()
    namespace = base.namespace
    if "namespace" in raw:
        ranges = {}
        for key, items in raw["namespace"].items():
            kind = FaultKind(key)
            ranges[kind] = [(parse_int(b), parse_int(n)) for b, n in items]
        namespace = FaultNamespace.build(ranges)
    schemes = dict(base.schemes)
    if "schemes" in raw:
        schemes = {}
        for sid, body in raw["schemes"].items():
            schemes[int(sid)] = CodecScheme(int(sid), SchemeKind(body["kind"]), parse_int(body["param"]),
                                            FaultKind(body["fault_kind"]))
    decision = {s.fault_kind: s.scheme_id for s in schemes.values()}
    return CodecConfig(namespace=namespace, schemes=schemes, decision=decision)


def from_mapping(raw: Mapping, source: str = "<mapping>") -> HarnessConfig:
    try:
        cfg = HarnessConfig(codec=_codec(raw), source=source)
        for key, value in raw.get("timeouts", {}).items():
            if not hasattr(cfg.timeouts, key):
                raise ConfigError(f"unknown timeout {key!r}")
            setattr(cfg.timeouts, key, float(value))
        for key, value in raw.get("bench", {}).items():
            if not hasattr(cfg.bench, key):
                raise ConfigError(f"unknown bench option {key!r}")
            setattr(cfg.bench, key, parse_int(value))
        demo = raw.get("demo", {})
        cfg.demo_inputs = parse_int(demo.get("inputs", cfg.demo_inputs))
        cfg.demo_seed = parse_int(demo.get("seed", cfg.demo_seed))
        for name, body in raw.get("simulate", {}).get("scenarios", {}).items():
            cfg.scenarios[name] = scenario_from_mapping(name, body)
    except (KeyError, TypeError) as e:
        raise ConfigError(f"{source}: malformed entry {e}") from e
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from e
    return cfg


def load_config(path: str | None = None) -> HarnessConfig:
    if path is None:
        text = resources.files("selfdbg").joinpath("data/default.toml").read_text()
        source = "default.toml"
    else:
        with open(path) as fh:
            text = fh.read()
        source = path
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{source}: {e}") from e
    return from_mapping(raw, source)
