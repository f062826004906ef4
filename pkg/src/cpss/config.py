"""Run configuration: one JSON file, unknown keys rejected with their key path."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .harness import ShieldParams
from .traffic import ARCHETYPES, REGIMES, ConfigurationError, ScenarioConfig, default_scenario


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyParams:
    train_seed: int = 7
    episodes: int = 400
    max_steps: int = 20_000
    parallel: int = 8
    learning_rate: float = 0.1
    discount: float = 0.9
    exploration: float = 0.1
    exploration_final: float = 0.01


@dataclass(frozen=True)
class VerifyParams:
    gamma: float = 0.9
    pairs: int = 100
    seed: int = 1234


@dataclass(frozen=True)
class RunConfig:
    scenarios: dict = field(default_factory=lambda: {a: {} for a in ARCHETYPES})
    regimes: tuple = REGIMES
    seeds: tuple = tuple(range(10))
    episodes: int = 200
    trace_episodes: int = 5
    output_dir: str = "runs/default"
    shield: ShieldParams = ShieldParams()
    policy: PolicyParams = PolicyParams()
    verify: VerifyParams = VerifyParams()

    def scenario(self, archetype: str) -> ScenarioConfig:
        return default_scenario(archetype, **self.scenarios[archetype])

    def to_dict(self) -> dict:
        return {
            "scenarios": {k: dict(v) for k, v in self.scenarios.items()},
            "regimes": list(self.regimes),
            "seeds": list(self.seeds),
            "episodes": self.episodes,
            "trace_episodes": self.trace_episodes,
            "output_dir": self.output_dir,
            "shield": asdict(self.shield),
            "policy": asdict(self.policy),
            "verify": asdict(self.verify),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"


def _check_type(path: str, value, expected):
    if expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, expected)
    if not ok:
        raise ConfigError(f"{path}: expected {expected.__name__}, got {type(value).__name__}")
    return float(value) if expected is float else value


def _section(cls, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key '{path}.{key}'")
    values = {}
    for key, value in raw.items():
        default = getattr(cls(), key)
        values[key] = _check_type(f"{path}.{key}", value, type(default))
    try:
        return cls(**values)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _scenario_overrides(raw, path: str) -> dict:
    if not isinstance(raw, dict) or not raw:
        raise ConfigError(f"{path}: expected a nonempty object keyed by archetype")
    known = {f.name: f for f in fields(ScenarioConfig)}
    out = {}
    for archetype, overrides in raw.items():
        if archetype not in ARCHETYPES:
            raise ConfigError(f"unknown key '{path}.{archetype}' (archetypes: {', '.join(ARCHETYPES)})")
        if not isinstance(overrides, dict):
            raise ConfigError(f"{path}.{archetype}: expected an object")
        base = default_scenario(archetype)
        for key, value in overrides.items():
            if key not in known or key == "archetype":
                raise ConfigError(f"unknown key '{path}.{archetype}.{key}'")
            _check_type(f"{path}.{archetype}.{key}", value, type(getattr(base, key)))
        try:
            default_scenario(archetype, **overrides)
        except ConfigurationError as exc:
            raise ConfigError(f"{path}.{archetype}: {exc}") from exc
        out[archetype] = dict(overrides)
    return out


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected an object")
    known = {f.name for f in fields(RunConfig)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key '{key}'")
    kwargs = {}
    if "scenarios" in raw:
        kwargs["scenarios"] = _scenario_overrides(raw["scenarios"], "scenarios")
    if "regimes" in raw:
        regimes = raw["regimes"]
        if not isinstance(regimes, list) or not regimes:
            raise ConfigError("regimes: expected a nonempty list")
        for r in regimes:
            if r not in REGIMES:
                raise ConfigError(f"regimes: unknown regime {r!r} (expected {', '.join(REGIMES)})")
        kwargs["regimes"] = tuple(regimes)
    if "seeds" in raw:
        seeds = raw["seeds"]
        if not isinstance(seeds, list) or not seeds:
            raise ConfigError("seeds: expected a nonempty list of integers")
        for s in seeds:
            _check_type("seeds[]", s, int)
        if len(set(seeds)) != len(seeds):
            raise ConfigError("seeds: duplicate seed")
        kwargs["seeds"] = tuple(seeds)
    for key in ("episodes", "trace_episodes"):
        if key in raw:
            kwargs[key] = _check_type(key, raw[key], int)
            if kwargs[key] < (1 if key == "episodes" else 0):
                raise ConfigError(f"{key}: out of range")
    if "output_dir" in raw:
        kwargs["output_dir"] = _check_type("output_dir", raw["output_dir"], str)
    for key, cls in (("shield", ShieldParams), ("policy", PolicyParams), ("verify", VerifyParams)):
        if key in raw:
            kwargs[key] = _section(cls, raw[key], key)
    cfg = RunConfig(**kwargs)
    if not 0 <= cfg.verify.gamma < 1:
        raise ConfigError("verify.gamma: must lie in [0, 1)")
    if cfg.verify.pairs < 50:
        raise ConfigError("verify.pairs: need at least 50 coupled pairs")
    return cfg


def loads(text: str) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return from_dict(raw)


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        return loads(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
