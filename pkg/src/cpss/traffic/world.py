"""Single-episode view of the simulator: immutable world snapshots.

``reset``/``step`` round-trip a :class:`WorldState` through a one-row
:class:`TrafficBatch`, so they share every line of dynamics with batched
rollouts.  The environment stream is keyed by ``(seed, time_step)``; a snapshot
therefore carries its seed and can be stepped without hidden state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .engine import ACTIONS, CROSSING, N_ACTIONS, TrafficBatch
from .engine import proximity_cost as _proximity_cost
from .scenario import ConfigurationError, RegimeSchedule, ScenarioConfig

DEFAULT_WINDOW_RADIUS = 50.0


@dataclass(frozen=True)
class VehicleState:
    position: tuple[float, float]
    velocity: tuple[float, float]
    lane_index: int
    length: float = 5.0
    cruise_speed: float = 0.0
    # lane index for road traffic, CROSSING + k for the crossing road of intersection k
    path: int = 0

    @property
    def speed(self) -> float:
        return float(np.hypot(*self.velocity))


@dataclass(frozen=True)
class LaneGeometry:
    lane_count: int
    lane_width: float
    ramp_end: float | None = None
    curvature: tuple[float, ...] = ()
    segment_length: float = 0.0


@dataclass(frozen=True)
class WorldState:
    ego: VehicleState
    others: tuple[VehicleState, ...]
    lanes: LaneGeometry
    time_step: int
    regime_phase: float
    collided: bool
    off_road: bool
    seed: int

    @property
    def done(self) -> bool:
        return self.collided or self.off_road


@dataclass(frozen=True)
class StepOutcome:
    next_state: WorldState
    reward: float
    cost: float
    min_distance: float
    density: float
    done: bool


def proximity_cost(min_distance: float, safety_margin: float) -> float:
    if min_distance < 0 or safety_margin <= 0:
        raise ValueError("min_distance must be >= 0 and safety_margin > 0")
    return float(_proximity_cost(min_distance, safety_margin))


def _snapshot(batch: TrafficBatch, horizon_done: bool = False) -> WorldState:
    cfg = batch.config
    others = []
    for k in np.nonzero(batch.oactive[0])[0]:
        path = int(batch.opath[0, k])
        v = float(batch.ov[0, k])
        crossing = path >= CROSSING
        others.append(VehicleState(
            position=(float(batch.ox[0, k]), float(batch.oy[0, k])),
            velocity=(0.0, v) if crossing else (v, 0.0),
            lane_index=-1 if crossing else path,
            cruise_speed=float(batch.ocruise[0, k]),
            path=path,
        ))
    ego = VehicleState(
        position=(float(batch.ex[0]), float(batch.ey[0])),
        velocity=(float(batch.ev[0]), 0.0),
        lane_index=int(batch.elane[0]),
    )
    lanes = LaneGeometry(
        lane_count=cfg.lane_count,
        lane_width=cfg.lane_width,
        ramp_end=cfg.ramp_end if cfg.archetype == "merge" else None,
        curvature=tuple(float(k) for k in batch.curvature[0]) if batch.curvature is not None else (),
        segment_length=cfg.segment_length if cfg.archetype == "track" else 0.0,
    )
    return WorldState(
        ego=ego, others=tuple(others), lanes=lanes, time_step=batch.t,
        regime_phase=float(batch.regime_phase()[0]),
        collided=bool(batch.collided[0]), off_road=bool(batch.off_road[0]), seed=batch.seeds[0],
    )


def _load(state: WorldState, config: ScenarioConfig, schedule: RegimeSchedule) -> TrafficBatch:
    if len(state.others) > config.max_vehicles:
        raise ConfigurationError(f"{len(state.others)} vehicles exceed max_vehicles={config.max_vehicles}")
    batch = TrafficBatch(config, schedule, [state.seed])
    batch.t = state.time_step
    batch.mult[0, min(state.time_step, config.horizon - 1)] = state.regime_phase
    batch.ex[0], batch.ey[0] = state.ego.position
    batch.ev[0] = state.ego.speed
    batch.elane[0] = state.ego.lane_index
    batch.oactive[:] = False
    for k, o in enumerate(state.others):
        batch.ox[0, k], batch.oy[0, k] = o.position
        batch.ov[0, k] = o.speed
        batch.ocruise[0, k] = o.cruise_speed
        batch.opath[0, k] = o.path
        batch.oactive[0, k] = True
    if state.lanes.curvature:
        batch.curvature = np.asarray(state.lanes.curvature, dtype=float)[None, :]
    batch.collided[0] = state.collided
    batch.off_road[0] = state.off_road
    batch.done[0] = state.done or state.time_step >= config.horizon
    return batch


def reset(config: ScenarioConfig, schedule: RegimeSchedule, seed: int) -> WorldState:
    return _snapshot(TrafficBatch(config, schedule, [seed]))


def step(state: WorldState, action: int, config: ScenarioConfig, schedule: RegimeSchedule,
         window_radius: float = DEFAULT_WINDOW_RADIUS) -> StepOutcome:
    if action not in ACTIONS:
        raise ValueError(f"action {action!r} not in {ACTIONS}")
    if state.done or state.time_step >= config.horizon:
        raise ValueError("episode already finished")
    batch = _load(state, config, schedule)
    out = batch.outcomes(np.array([[action]]))
    rec = batch.commit(out)
    nxt = _snapshot(batch)
    return StepOutcome(
        next_state=nxt,
        reward=float(rec.reward[0]),
        cost=float(rec.cost[0]),
        min_distance=float(rec.min_distance[0]),
        density=float(batch.density(window_radius)[0]),
        done=bool(batch.done[0]),
    )


def predict_costs(state: WorldState, action_set: Iterable[int], config: ScenarioConfig,
                  schedule: RegimeSchedule | None = None) -> dict[int, float]:
    """One-step predicted proximity cost of each action from ``state``."""
    actions = sorted(set(action_set))
    if any(a not in ACTIONS for a in actions):
        raise ValueError(f"actions must be drawn from {ACTIONS}")
    batch = _load(state, config, schedule or RegimeSchedule())
    out = batch.outcomes(np.array([actions]))
    return {a: float(c) for a, c in zip(actions, out.cost[0])}


def density_estimate(state: WorldState, window_radius: float = DEFAULT_WINDOW_RADIUS) -> float:
    """Other vehicles within ``window_radius`` of the ego, per 100 m.

    Track snapshots carry no traffic; there the signal is the sharpest effective
    curvature within the window, per 100 m.
    """
    if not window_radius > 0:
        raise ValueError("window_radius must be positive")
    ex, ey = state.ego.position
    if state.lanes.curvature:
        seg = state.lanes.segment_length
        lo, hi = max(int((ex - window_radius) // seg), 0), int((ex + window_radius) // seg)
        peak = max((abs(k) for k in state.lanes.curvature[lo:hi + 1]), default=0.0)
        return 100.0 * peak * state.regime_phase
    count = sum(1 for o in state.others
                if np.hypot(o.position[0] - ex, o.position[1] - ey) <= window_radius)
    return count / (window_radius / 100.0)


__all__ = [
    "DEFAULT_WINDOW_RADIUS", "LaneGeometry", "N_ACTIONS", "StepOutcome", "VehicleState", "WorldState",
    "density_estimate", "predict_costs", "proximity_cost", "reset", "step",
]
