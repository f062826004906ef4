"""Scenario geometry, regime schedules and the seeded environment streams."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

ARCHETYPES = ("merge", "highway", "intersection", "track")
REGIMES = ("stationary", "mild", "average", "high")

MULTIPLIER_MIN = 0.25
MULTIPLIER_MAX = 4.0


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    """Geometry and traffic parameters for one archetype.

    Distances are meters, speeds m/s, ``dt`` seconds.  ``spawn_rate_base`` is the
    expected number of spawns per step at multiplier 1 (on the track it is the
    fraction of curved segments instead).
    """

    archetype: str
    lane_count: int
    spawn_rate_base: float
    horizon: int = 80
    collision_radius: float = 2.5
    safety_margin: float = 15.0
    seed: int = 0
    dt: float = 0.5
    v_max: float = 30.0
    accel: float = 4.0
    # v_max / dt: a single emergency-brake step brings the ego to rest
    brake_decel: float = 60.0
    ego_speed: float = 20.0
    lane_width: float = 4.0
    min_headway: float = 5.0
    other_speed_min: float = 18.0
    other_speed_max: float = 26.0
    window_ahead: float = 150.0
    window_behind: float = 80.0
    spawn_gap: float = 20.0
    max_vehicles: int = 32
    distance_cap: float = 100.0
    ramp_end: float = 160.0
    intersection_first: float = 80.0
    intersection_spacing: float = 150.0
    corridor_half_width: float = 3.0
    crossing_span: float = 60.0
    segment_length: float = 60.0
    curvature_min: float = 1.0 / 250.0
    curvature_max: float = 1.0 / 60.0
    grip: float = 6.0
    progress_reward: float = 1.0
    collision_penalty: float = 5.0
    offroad_penalty: float = 5.0
    lane_change_penalty: float = 0.02
    accel_penalty: float = 0.01

    def __post_init__(self):
        if self.archetype not in ARCHETYPES:
            raise ConfigurationError(f"unknown archetype {self.archetype!r}; expected one of {ARCHETYPES}")
        if self.lane_count < 1:
            raise ConfigurationError(f"lane_count must be >= 1, got {self.lane_count}")
        if self.archetype == "merge" and self.lane_count < 2:
            raise ConfigurationError("merge needs a ramp lane plus at least one main lane")
        if self.spawn_rate_base < 0:
            raise ConfigurationError("spawn_rate_base must be >= 0")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        for name in ("collision_radius", "safety_margin", "dt", "v_max", "lane_width", "brake_decel"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.safety_margin <= self.collision_radius:
            raise ConfigurationError("safety_margin must exceed collision_radius")
        if self.other_speed_min > self.other_speed_max:
            raise ConfigurationError("other_speed_min exceeds other_speed_max")
        if self.max_vehicles < 1:
            raise ConfigurationError("max_vehicles must be >= 1")
        if self.archetype == "intersection" and self.corridor_half_width < self.collision_radius:
            raise ConfigurationError("corridor_half_width must be >= collision_radius")

    @property
    def half_width(self) -> float:
        """Lateral half-width of the drivable surface (track archetype)."""
        return self.lane_count * self.lane_width / 2.0

    def lane_center(self, lane):
        return lane * self.lane_width

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


def default_scenario(archetype: str, **overrides) -> ScenarioConfig:
    base = {
        "merge": dict(lane_count=3, spawn_rate_base=0.6),
        "highway": dict(lane_count=3, spawn_rate_base=0.6),
        "intersection": dict(
            lane_count=1, spawn_rate_base=0.5, safety_margin=8.0, v_max=20.0, brake_decel=40.0,
            ego_speed=14.0, other_speed_min=8.0, other_speed_max=14.0,
        ),
        "track": dict(
            lane_count=1, spawn_rate_base=0.5, lane_width=6.0, safety_margin=3.0,
            collision_radius=0.5,
        ),
    }
    if archetype not in base:
        raise ConfigurationError(f"unknown archetype {archetype!r}")
    params = dict(base[archetype])
    params.update(overrides)
    return ScenarioConfig(archetype=archetype, **params)


@dataclass(frozen=True)
class RegimeSchedule:
    """Spawn-rate multiplier trajectory for one nonstationarity level.

    Block schedules draw a random phase offset per episode so a block boundary
    can fall inside an episode shorter than the block length.
    """

    regime: str = "stationary"
    mild_period: int = 200
    mild_amplitude: float = 0.25
    average_block: int = 100
    average_levels: tuple = (0.5, 1.0, 1.5, 2.0)
    high_block: int = 25
    high_levels: tuple = (0.25, 0.5, 1.0, 2.0, 4.0)
    high_jitter: float = 0.1

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigurationError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        levels = tuple(self.average_levels) + tuple(self.high_levels)
        if any(not MULTIPLIER_MIN <= v <= MULTIPLIER_MAX for v in levels):
            raise ConfigurationError("regime levels must lie in [0.25, 4.0]")
        if not 0 <= self.mild_amplitude < 1 or not 0 <= self.high_jitter < 1:
            raise ConfigurationError("amplitude and jitter must lie in [0, 1)")


def episode_streams(seed: int):
    """Independent generators for (initial traffic, per-step draws, regime, layout).

    Everything random in an episode flows from these, so two runs sharing a seed
    see identical traffic regardless of what the ego does.
    """
    children = np.random.SeedSequence(int(seed)).spawn(4)
    return tuple(np.random.default_rng(c) for c in children)


def multipliers(schedule: RegimeSchedule, rng: np.random.Generator, horizon: int) -> np.ndarray:
    t = np.arange(horizon)
    regime = schedule.regime
    if regime == "stationary":
        return np.ones(horizon)
    if regime == "mild":
        phase = rng.random() * 2 * np.pi
        m = 1.0 + schedule.mild_amplitude * np.sin(2 * np.pi * t / schedule.mild_period + phase)
    elif regime == "average":
        offset = int(rng.integers(schedule.average_block))
        blocks = (t + offset) // schedule.average_block
        levels = rng.choice(np.asarray(schedule.average_levels), size=int(blocks[-1]) + 1)
        m = levels[blocks]
    else:
        offset = int(rng.integers(schedule.high_block))
        blocks = (t + offset) // schedule.high_block
        levels = rng.choice(np.asarray(schedule.high_levels), size=int(blocks[-1]) + 1)
        jitter = 1.0 + schedule.high_jitter * (2 * rng.random(horizon) - 1)
        m = levels[blocks] * jitter
    return np.clip(m, MULTIPLIER_MIN, MULTIPLIER_MAX)


def track_layout(config: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """Signed curvature per track segment; the first two segments are straight."""
    reach = config.horizon * config.v_max * config.dt + config.window_ahead + config.distance_cap
    n = int(np.ceil(reach / config.segment_length)) + 2
    curved = rng.random(n) < config.spawn_rate_base
    magnitude = config.curvature_min + rng.random(n) * (config.curvature_max - config.curvature_min)
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    kappa = np.where(curved, sign * magnitude, 0.0)
    kappa[:2] = 0.0
    return kappa
