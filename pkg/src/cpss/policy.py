"""Tabular Q-learning stand-in for the learned driving policy.

Training never touches the shield: this module imports only the simulator.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .traffic import ACCELERATE, KEEP, N_ACTIONS, RegimeSchedule, ScenarioConfig, TrafficBatch

FEATURES = ("lead_gap", "lead_closing_speed", "ego_speed", "lane_index", "lateral_clearance")
POLICY_MAGIC = b"CPSSQ"
POLICY_VERSION = 1


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureDiscretizer:
    """Interior bin edges per feature; a value ``v`` falls in bin ``#(edges <= v)``."""

    edges: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        if len(self.edges) != len(FEATURES):
            raise PolicyError(f"expected {len(FEATURES)} edge lists, got {len(self.edges)}")
        for e in self.edges:
            if list(e) != sorted(e):
                raise PolicyError(f"bin edges must be sorted: {e}")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(e) + 1 for e in self.edges)

    @property
    def n_states(self) -> int:
        return int(np.prod(self.shape))

    def encode(self, features) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features, dtype=float))
        ids = np.zeros(features.shape[0], dtype=np.int64)
        for j, (edges, n) in enumerate(zip(self.edges, self.shape)):
            ids = ids * n + np.searchsorted(np.asarray(edges), features[:, j], side="right")
        return ids

    @classmethod
    def for_scenario(cls, config: ScenarioConfig) -> "FeatureDiscretizer":
        v = config.v_max
        speed = (0.2 * v, 0.4 * v, 0.6 * v, v - 1e-6)
        lane = (0.5, 1.5, 2.5, 3.5)
        gap = (8.0, 15.0, 30.0, 60.0)
        if config.archetype == "track":
            w = config.half_width
            return cls((gap, (-6.0, -2.0, 0.0, 4.0), speed, lane, (w / 3, 2 * w / 3, 0.85 * w, w - 1e-6)))
        if config.archetype == "intersection":
            return cls((gap, speed, speed, lane, (5.0, 10.0, 20.0, 30.0)))
        return cls((gap, (-2.0, 2.0, 6.0, 12.0), speed, lane, (5.0, 10.0, 20.0, 40.0)))


@dataclass
class QTable:
    values: np.ndarray
    discretizer: FeatureDiscretizer
    learning_rate: float = 0.1
    discount: float = 0.9
    exploration: float = 0.1
    archetype: str = ""
    visits: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.values.shape != (self.discretizer.n_states, N_ACTIONS):
            raise PolicyError(
                f"table shape {self.values.shape} does not match "
                f"({self.discretizer.n_states}, {N_ACTIONS})"
            )
        if not 0 < self.learning_rate <= 1:
            raise PolicyError("learning_rate must lie in (0, 1]")
        if not 0 <= self.discount < 1:
            raise PolicyError("discount must lie in [0, 1)")
        if not 0 <= self.exploration <= 1:
            raise PolicyError("exploration must lie in [0, 1]")

    def act(self, batch: TrafficBatch) -> np.ndarray:
        return greedy_actions(self, self.discretizer.encode(batch.features()))


def greedy_action(q: QTable, state_id: int) -> int:
    if not 0 <= state_id < q.values.shape[0]:
        raise PolicyError(f"state id {state_id} out of range")
    return int(greedy_actions(q, np.array([state_id]))[0])


def greedy_actions(q: QTable, state_ids: np.ndarray) -> np.ndarray:
    rows = q.values[state_ids]
    if not np.all(np.isfinite(rows)):
        raise PolicyError("Q-table row contains non-finite values")
    return np.argmax(rows, axis=1)


class ScriptedAggressive:
    """Accelerates until v_max, then keeps lane. Never brakes."""

    def __init__(self, v_max: float):
        self.v_max = v_max

    def act(self, batch: TrafficBatch) -> np.ndarray:
        return np.where(batch.ev < self.v_max, ACCELERATE, KEEP)


def scripted_aggressive(state, v_max: float = 30.0) -> int:
    """Single-state form of :class:`ScriptedAggressive`."""
    return ACCELERATE if state.ego.speed < v_max else KEEP


def episode_seeds(seed: int, n: int, *key: int) -> list[int]:
    """``n`` 64-bit episode seeds derived from ``seed`` and an optional spawn key."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return [int(s) for s in ss.generate_state(n, dtype=np.uint64)]


def train(
    config: ScenarioConfig,
    schedule: RegimeSchedule,
    episodes: int,
    seed: int,
    *,
    max_steps: int = 20_000,
    parallel: int = 8,
    learning_rate: float = 0.1,
    discount: float = 0.9,
    exploration: float = 0.1,
    exploration_final: float = 0.01,
    discretizer: FeatureDiscretizer | None = None,
    initial_value: float = 0.0,
) -> QTable:
    """One-step Q-learning with linearly decaying epsilon-greedy exploration.

    Episodes run ``parallel`` at a time; transitions are applied to the table in
    row order each step, so the result depends only on the arguments.  Time-limit
    truncation bootstraps; collisions and road exits are terminal.  An
    ``initial_value`` at or above ``r_max / (1 - discount)`` makes the table
    optimistic, so every action is tried before greedy selection settles.
    """
    if episodes < 1:
        raise PolicyError("episodes must be >= 1")
    if max_steps < 1 or parallel < 1:
        raise PolicyError("max_steps and parallel must be >= 1")
    disc = discretizer or FeatureDiscretizer.for_scenario(config)
    q = QTable(np.full((disc.n_states, N_ACTIONS), float(initial_value)), disc, learning_rate, discount, exploration,
               config.archetype)
    visits = np.zeros((disc.n_states, N_ACTIONS), dtype=np.int64)
    seeds = episode_seeds(seed, episodes, 0)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(1,)))
    values = q.values
    steps = 0
    for start in range(0, episodes, parallel):
        if steps >= max_steps:
            break
        batch = TrafficBatch(config, schedule, seeds[start:start + parallel])
        state = disc.encode(batch.features())
        while not batch.done.all() and steps < max_steps:
            frac = min(steps / max_steps, 1.0)
            eps = exploration + (exploration_final - exploration) * frac
            explore = rng.random(batch.size) < eps
            random_action = rng.integers(N_ACTIONS, size=batch.size)
            greedy = np.argmax(values[state], axis=1)
            action = np.where(explore, random_action, greedy)
            rec = batch.commit(batch.outcomes(action[:, None]))
            nxt = disc.encode(batch.features())
            terminal = rec.collided | rec.off_road
            for i in np.nonzero(rec.live)[0]:
                if steps >= max_steps:
                    break
                s, a = state[i], action[i]
                target = rec.reward[i] if terminal[i] else rec.reward[i] + discount * values[nxt[i]].max()
                values[s, a] += learning_rate * (target - values[s, a])
                visits[s, a] += 1
                steps += 1
            state = nxt
    q.visits = visits
    return q


# -- serialization ---------------------------------------------------------------


def save_qtable(q: QTable, path) -> None:
    """Versioned little-endian binary: header, discretizer edges, then the table."""
    name = q.archetype.encode("utf-8")
    parts = [struct.pack("<5sHH", POLICY_MAGIC, POLICY_VERSION, len(q.discretizer.edges))]
    for edges in q.discretizer.edges:
        parts.append(struct.pack("<H", len(edges)))
        parts.append(np.asarray(edges, dtype="<f8").tobytes())
    parts.append(struct.pack("<HI", N_ACTIONS, q.values.shape[0]))
    parts.append(struct.pack("<ddd", q.learning_rate, q.discount, q.exploration))
    parts.append(struct.pack("<H", len(name)) + name)
    parts.append(np.ascontiguousarray(q.values, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_qtable(path) -> QTable:
    data = Path(path).read_bytes()
    try:
        magic, version, n_features = struct.unpack_from("<5sHH", data, 0)
        if magic != POLICY_MAGIC:
            raise PolicyError(f"{path}: not a policy file")
        if version != POLICY_VERSION:
            raise PolicyError(f"{path}: unsupported policy version {version}")
        off = struct.calcsize("<5sHH")
        edges = []
        for _ in range(n_features):
            (n,) = struct.unpack_from("<H", data, off)
            off += 2
            edges.append(tuple(np.frombuffer(data, dtype="<f8", count=n, offset=off).tolist()))
            off += 8 * n
        n_actions, n_states = struct.unpack_from("<HI", data, off)
        off += struct.calcsize("<HI")
        lr, gamma, eps = struct.unpack_from("<ddd", data, off)
        off += 24
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        table = np.frombuffer(data, dtype="<f8", count=n_states * n_actions, offset=off)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise PolicyError(f"{path}: truncated or corrupt policy file") from exc
    if n_actions != N_ACTIONS:
        raise PolicyError(f"{path}: policy has {n_actions} actions, simulator has {N_ACTIONS}")
    if off + table.nbytes != len(data):
        raise PolicyError(f"{path}: trailing or missing bytes")
    return QTable(table.reshape(n_states, n_actions).astype(float), FeatureDiscretizer(tuple(edges)),
                  lr, gamma, eps, name)
