"""Batched kinematic traffic kernel.

All episodes of a batch advance in lockstep as rows of fixed-size numpy arrays;
other vehicles occupy ``max_vehicles`` slots per row and finished rows are
frozen.  The single-episode API in :mod:`cpss.traffic.world` is a batch of one,
so there is exactly one implementation of the dynamics.

Other vehicles never initiate contact: each follows its path at cruise speed
but never ends a step closer than ``min_headway`` to where its leader (the ego
included, when it sits on the path) stood at the start of the step.  Their
motion therefore does not depend on the ego's current action, which is what
makes the one-step cost predictor exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenario import RegimeSchedule, ScenarioConfig, episode_streams, multipliers, track_layout

KEEP, ACCELERATE, DECELERATE, LANE_LEFT, LANE_RIGHT = range(5)
ACTIONS = (KEEP, ACCELERATE, DECELERATE, LANE_LEFT, LANE_RIGHT)
ACTION_NAMES = ("keep", "accelerate", "decelerate", "lane_left", "lane_right")
N_ACTIONS = len(ACTIONS)

# path ids at or above this value are crossing roads: CROSSING + intersection index
CROSSING = 1000
_INIT_SPACING = 30.0
_CROSS_INIT = (-60.0, -40.0, -20.0, 0.0, 20.0, 40.0)
_SHARP_CURVATURE = 1.0 / 150.0


def proximity_cost(min_distance, safety_margin):
    """Linear ramp from 0 at the margin to 1 at contact."""
    return np.clip((safety_margin - np.asarray(min_distance, dtype=float)) / safety_margin, 0.0, 1.0)


def spawn_slots(config: ScenarioConfig) -> int:
    if config.archetype in ("highway", "merge"):
        return 2 * len(main_lanes(config))
    if config.archetype == "intersection":
        return 2
    return 0


def main_lanes(config: ScenarioConfig) -> range:
    # lane 0 of the merge archetype is the on-ramp; traffic only uses main lanes
    return range(1, config.lane_count) if config.archetype == "merge" else range(config.lane_count)


def intersection_x(config: ScenarioConfig, k):
    return config.intersection_first + config.intersection_spacing * k


@dataclass
class Outcomes:
    """Candidate results, one column per evaluated action (shape (E, A))."""

    actions: np.ndarray
    x: np.ndarray
    y: np.ndarray
    v: np.ndarray
    lane: np.ndarray
    min_distance: np.ndarray
    cost: np.ndarray
    reward: np.ndarray
    collided: np.ndarray
    off_road: np.ndarray
    others_x: np.ndarray
    others_y: np.ndarray
    others_v: np.ndarray


@dataclass
class StepRecord:
    """What one committed step produced, shape (E,)."""

    action: np.ndarray
    cost: np.ndarray
    reward: np.ndarray
    min_distance: np.ndarray
    collided: np.ndarray
    off_road: np.ndarray
    live: np.ndarray


class TrafficBatch:
    """Mutable lockstep state for a batch of episodes sharing one scenario and regime."""

    def __init__(self, config: ScenarioConfig, schedule: RegimeSchedule, seeds):
        self.config = config
        self.schedule = schedule
        self.seeds = [int(s) for s in seeds]
        e, k, horizon = len(self.seeds), config.max_vehicles, config.horizon
        self.t = 0
        self.n_draws = max(1, 2 * spawn_slots(config))
        self.mult = np.empty((e, horizon))
        self.draws = np.empty((e, horizon, self.n_draws))
        self.curvature = None
        self.ex = np.zeros(e)
        self.ey = np.zeros(e)
        self.ev = np.full(e, float(config.ego_speed))
        self.elane = np.zeros(e, dtype=np.int64)
        self.ox = np.zeros((e, k))
        self.oy = np.zeros((e, k))
        self.ov = np.zeros((e, k))
        self.ocruise = np.zeros((e, k))
        self.opath = np.zeros((e, k), dtype=np.int64)
        self.oactive = np.zeros((e, k), dtype=bool)
        self.collided = np.zeros(e, dtype=bool)
        self.off_road = np.zeros(e, dtype=bool)
        self.done = np.zeros(e, dtype=bool)
        layouts = []
        for i, seed in enumerate(self.seeds):
            init_rng, step_rng, regime_rng, layout_rng = episode_streams(seed)
            self.mult[i] = multipliers(schedule, regime_rng, horizon)
            self.draws[i] = step_rng.random((horizon, self.n_draws))
            if config.archetype == "track":
                layouts.append(track_layout(config, layout_rng))
            self._populate(i, init_rng)
        if layouts:
            self.curvature = np.stack(layouts)

    # -- initial traffic -------------------------------------------------------

    def _populate(self, i: int, rng: np.random.Generator) -> None:
        cfg = self.config
        if cfg.archetype == "highway":
            self.elane[i] = int(rng.integers(cfg.lane_count))
        self.ey[i] = cfg.lane_center(self.elane[i]) if cfg.archetype != "track" else 0.0
        if cfg.spawn_rate_base <= 0 or cfg.archetype == "track":
            return
        p0 = min(0.9, 0.5 * cfg.spawn_rate_base * self.mult[i, 0])
        placed = []
        if cfg.archetype in ("highway", "merge"):
            offsets = np.arange(-cfg.window_behind, cfg.window_ahead, _INIT_SPACING)
            for lane in main_lanes(cfg):
                u = rng.random((len(offsets), 2))
                for off, (occupy, speed) in zip(offsets, u):
                    if occupy >= p0 or abs(off) < 2 * cfg.collision_radius:
                        continue
                    if lane == self.elane[i] and abs(off) < cfg.safety_margin + 10.0:
                        continue
                    placed.append((lane, self.ex[i] + off, cfg.lane_center(lane), speed))
        else:
            for k in range(self._next_intersection(self.ex[i]), 1000):
                xk = intersection_x(cfg, k)
                if xk > self.ex[i] + cfg.window_ahead:
                    break
                u = rng.random((len(_CROSS_INIT), 2))
                for y, (occupy, speed) in zip(_CROSS_INIT, u):
                    if occupy < p0:
                        placed.append((CROSSING + k, xk, y, speed))
        for slot, (path, x, y, speed) in enumerate(placed[: cfg.max_vehicles]):
            cruise = cfg.other_speed_min + speed * (cfg.other_speed_max - cfg.other_speed_min)
            self.opath[i, slot] = path
            self.ox[i, slot] = x
            self.oy[i, slot] = y
            self.ov[i, slot] = cruise
            self.ocruise[i, slot] = cruise
            self.oactive[i, slot] = True

    def _next_intersection(self, x):
        cfg = self.config
        k = np.ceil((x - cfg.corridor_half_width - cfg.intersection_first) / cfg.intersection_spacing)
        return np.maximum(k, 0).astype(np.int64)

    # -- environment signals ---------------------------------------------------

    @property
    def size(self) -> int:
        return len(self.seeds)

    def regime_phase(self) -> np.ndarray:
        return self.mult[:, min(self.t, self.config.horizon - 1)]

    def curvature_at(self, x) -> np.ndarray:
        """Effective signed curvature under the ego (track only), shape (E,)."""
        seg = np.clip((np.asarray(x) // self.config.segment_length).astype(np.int64), 0,
                      self.curvature.shape[1] - 1)
        kappa = np.take_along_axis(self.curvature, seg[:, None], axis=1)[:, 0]
        return kappa * self.regime_phase()

    def density(self, window_radius: float) -> np.ndarray:
        """Vehicles within ``window_radius`` of the ego per 100 m (closed ball).

        On the track there is no traffic; the signal is the sharpest effective
        curvature within the window, expressed per 100 m.
        """
        cfg = self.config
        if cfg.archetype == "track":
            seg_len = cfg.segment_length
            lo = np.clip(((self.ex - window_radius) // seg_len).astype(np.int64), 0, None)
            hi = ((self.ex + window_radius) // seg_len).astype(np.int64)
            idx = np.arange(self.curvature.shape[1])[None, :]
            inside = (idx >= lo[:, None]) & (idx <= hi[:, None])
            peak = np.where(inside, np.abs(self.curvature), 0.0).max(axis=1)
            return 100.0 * peak * self.regime_phase()
        dist = np.hypot(self.ox - self.ex[:, None], self.oy - self.ey[:, None])
        count = np.count_nonzero(self.oactive & (dist <= window_radius), axis=1)
        return count / (window_radius / 100.0)

    # -- dynamics --------------------------------------------------------------

    def _others_next(self):
        cfg = self.config
        act = self.oactive
        crossing = self.opath >= CROSSING
        along = np.where(crossing, self.oy, self.ox)
        key = np.where(act, self.opath * 1.0e6 + along + 5.0e5, np.inf)
        order = np.argsort(key, axis=1, kind="stable")
        s_sorted = np.take_along_axis(along, order, axis=1)
        p_sorted = np.take_along_axis(self.opath, order, axis=1)
        a_sorted = np.take_along_axis(act, order, axis=1)
        lead_sorted = np.full_like(s_sorted, np.inf)
        same = a_sorted[:, 1:] & (p_sorted[:, 1:] == p_sorted[:, :-1])
        lead_sorted[:, :-1] = np.where(same, s_sorted[:, 1:], np.inf)
        leader = np.empty_like(lead_sorted)
        np.put_along_axis(leader, order, lead_sorted, axis=1)

        ex = self.ex[:, None]
        if cfg.archetype == "intersection":
            xk = intersection_x(cfg, self.opath - CROSSING)
            ego_on_path = crossing & (np.abs(ex - xk) < cfg.corridor_half_width) & (self.ey[:, None] > along)
            leader = np.where(ego_on_path, np.minimum(leader, self.ey[:, None]), leader)
        elif cfg.archetype in ("highway", "merge"):
            ego_on_path = ~crossing & (self.opath == self.elane[:, None]) & (ex > along)
            leader = np.where(ego_on_path, np.minimum(leader, ex), leader)

        target = np.minimum(along + self.ocruise * cfg.dt, leader - cfg.min_headway)
        new_along = np.where(act, np.maximum(along, target), along)
        new_v = np.where(act, (new_along - along) / cfg.dt, 0.0)
        nx = np.where(crossing, self.ox, new_along)
        ny = np.where(crossing, new_along, self.oy)
        return nx, ny, new_v

    def outcomes(self, actions=None) -> Outcomes:
        """Evaluate candidate actions from the current state without mutating it.

        ``actions`` has shape (E, A); ``None`` evaluates every action.
        """
        cfg = self.config
        e = self.size
        if actions is None:
            actions = np.broadcast_to(np.arange(N_ACTIONS), (e, N_ACTIONS))
        actions = np.asarray(actions, dtype=np.int64)
        if actions.min(initial=0) < 0 or actions.max(initial=0) >= N_ACTIONS:
            raise ValueError(f"action out of range 0..{N_ACTIONS - 1}")
        dt = cfg.dt
        v = self.ev[:, None]
        cv = np.where(actions == ACCELERATE, np.minimum(v + cfg.accel * dt, cfg.v_max), v)
        cv = np.where(actions == DECELERATE, np.maximum(v - cfg.brake_decel * dt, 0.0), cv)
        shift = (actions == LANE_LEFT).astype(np.int64) - (actions == LANE_RIGHT)
        cx = self.ex[:, None] + cv * dt
        ey = self.ey[:, None]
        nx, ny, nv = self._others_next()

        if cfg.archetype == "track":
            clane = np.broadcast_to(self.elane[:, None], actions.shape).copy()
            changed = np.zeros(actions.shape, dtype=bool)
            kappa = self.curvature_at(self.ex)[:, None]
            raw = ey - cv * cv * kappa * dt * dt
            grip = cfg.grip * dt * dt
            steer = np.where(actions == LANE_LEFT, raw + grip,
                             np.where(actions == LANE_RIGHT, raw - grip, raw - np.clip(raw, -grip, grip)))
            cy = np.where(cv > 0, steer, ey)
            moved = cv > 0
            boundary = cfg.half_width - np.abs(cy)
            hit = boundary < cfg.collision_radius
            min_d = np.where(moved, np.clip(boundary, 0.0, cfg.distance_cap), cfg.distance_cap)
            collided = hit
            off_road = hit
        else:
            clane = self.elane[:, None] + shift
            changed = shift != 0
            off_road = (clane < 0) | (clane >= cfg.lane_count)
            cy = np.broadcast_to(cfg.lane_center(clane).astype(float), actions.shape)
            moved = (cv > 0) | changed
            r0x = (self.ox - self.ex[:, None])[:, None, :]
            r0y = (self.oy - self.ey[:, None])[:, None, :]
            dx = (nx[:, None, :] - cx[:, :, None]) - r0x
            dy = (ny[:, None, :] - cy[:, :, None]) - r0y
            dd = dx * dx + dy * dy
            safe_dd = np.where(dd > 0, dd, 1.0)
            s = np.where(dd > 0, np.clip(-(r0x * dx + r0y * dy) / safe_dd, 0.0, 1.0), 0.0)
            dist = np.hypot(r0x + s * dx, r0y + s * dy)
            act = self.oactive[:, None, :]
            collided = np.any(act & (dist < cfg.collision_radius), axis=2)

            crossing = (self.opath >= CROSSING)[:, None, :]
            ahead = (self.ox >= self.ex[:, None])[:, None, :]
            lane_new = self.opath[:, None, :] == clane[:, :, None]
            lane_old = (self.opath == self.elane[:, None])[:, None, :]
            relevant_lane = ~crossing & (((lane_old | lane_new) & ahead) | (changed[:, :, None] & lane_new))
            xk = intersection_x(self.config, self.opath - CROSSING)
            relevant_cross = crossing & (xk + cfg.corridor_half_width >= self.ex[:, None])[:, None, :]
            relevant = act & moved[:, :, None] & (relevant_lane | relevant_cross)
            min_d = np.minimum(np.where(relevant, dist, np.inf).min(axis=2), cfg.distance_cap)

            if cfg.archetype == "merge":
                on_ramp = clane == 0
                left_late = (self.elane[:, None] == 0) & ~on_ramp & (cx > cfg.ramp_end)
                gap = np.where(on_ramp, np.maximum(cfg.ramp_end - cx, 0.0), np.where(left_late, 0.0, np.inf))
                min_d = np.where(moved, np.minimum(min_d, gap), min_d)
                collided = collided | (gap < cfg.collision_radius)
            min_d = np.where(off_road, 0.0, min_d)

        cost = proximity_cost(min_d, cfg.safety_margin)
        reward = (
            cfg.progress_reward * (cv * dt) / (cfg.v_max * dt)
            - cfg.lane_change_penalty * changed
            - cfg.accel_penalty * (actions == ACCELERATE)
            - cfg.collision_penalty * collided
            - cfg.offroad_penalty * (off_road & ~collided)
        )
        return Outcomes(actions, cx, cy, cv, clane, min_d, cost, reward, collided, off_road, nx, ny, nv)

    def commit(self, out: Outcomes, column=None) -> StepRecord:
        """Advance the live rows along column ``column`` of ``out`` and spawn traffic."""
        e = self.size
        if self.t >= self.config.horizon:
            raise RuntimeError("batch already reached the horizon")
        col = np.zeros(e, dtype=np.int64) if column is None else np.asarray(column, dtype=np.int64)
        rows = np.arange(e)
        pick = lambda a: a[rows, col]  # noqa: E731
        live = ~self.done
        rec = StepRecord(
            action=pick(out.actions), cost=pick(out.cost), reward=pick(out.reward),
            min_distance=pick(out.min_distance), collided=pick(out.collided),
            off_road=pick(out.off_road), live=live.copy(),
        )
        self.ex = np.where(live, pick(out.x), self.ex)
        self.ey = np.where(live, pick(out.y), self.ey)
        self.ev = np.where(live, pick(out.v), self.ev)
        lane = pick(out.lane)
        self.elane = np.where(live & ~rec.off_road, lane, self.elane)
        lv = live[:, None]
        self.ox = np.where(lv, out.others_x, self.ox)
        self.oy = np.where(lv, out.others_y, self.oy)
        self.ov = np.where(lv, out.others_v, self.ov)
        self.collided |= live & rec.collided
        self.off_road |= live & rec.off_road
        self._churn(live)
        self.t += 1
        self.done |= live & (self.collided | self.off_road | (self.t >= self.config.horizon))
        return rec

    def _churn(self, live: np.ndarray) -> None:
        """Despawn vehicles outside the window, then spawn from this step's draws."""
        cfg = self.config
        if cfg.archetype == "track":
            return
        crossing = self.opath >= CROSSING
        ex = self.ex[:, None]
        if cfg.archetype == "intersection":
            gone = crossing & ((self.oy > cfg.crossing_span)
                               | (intersection_x(cfg, self.opath - CROSSING) + cfg.crossing_span < ex))
        else:
            gone = (self.ox < ex - cfg.window_behind - 20.0) | (self.ox > ex + cfg.window_ahead + 20.0)
        self.oactive &= ~(gone & live[:, None])
        if cfg.spawn_rate_base <= 0:
            return
        n_slots = spawn_slots(cfg)
        draws = self.draws[:, self.t, :]
        prob = np.minimum(1.0, cfg.spawn_rate_base * self.mult[:, self.t] / n_slots)
        spread = cfg.other_speed_max - cfg.other_speed_min
        for j in range(n_slots):
            if cfg.archetype == "intersection":
                k = self._next_intersection(self.ex) + j
                path = CROSSING + k
                px = intersection_x(cfg, k).astype(float)
                py = np.full(self.size, -cfg.crossing_span)
                along, spot = self.oy, py
                allowed = px <= self.ex + cfg.window_ahead
            else:
                lane = main_lanes(cfg)[j // 2]
                path = np.full(self.size, lane, dtype=np.int64)
                px = self.ex + (cfg.window_ahead if j % 2 == 0 else -cfg.window_behind)
                py = np.full(self.size, float(cfg.lane_center(lane)))
                along, spot = self.ox, px
                allowed = np.ones(self.size, dtype=bool)
            on_path = self.oactive & (self.opath == path[:, None])
            clear = ~np.any(on_path & (np.abs(along - spot[:, None]) < cfg.spawn_gap), axis=1)
            free = ~self.oactive
            want = live & allowed & clear & free.any(axis=1) & (draws[:, 2 * j] < prob)
            if not want.any():
                continue
            r = np.nonzero(want)[0]
            s = np.argmax(free, axis=1)[r]
            cruise = cfg.other_speed_min + draws[r, 2 * j + 1] * spread
            self.opath[r, s] = path[r]
            self.ox[r, s] = px[r]
            self.oy[r, s] = py[r]
            self.ov[r, s] = cruise
            self.ocruise[r, s] = cruise
            self.oactive[r, s] = True

    # -- observation features ----------------------------------------------------

    def features(self) -> np.ndarray:
        """Ego-relative features (lead gap, lead closing speed, speed, lane, lateral clearance)."""
        cfg = self.config
        e = self.size
        cap = cfg.distance_cap
        out = np.empty((e, 5))
        out[:, 2] = self.ev
        out[:, 3] = self.elane
        if cfg.archetype == "track":
            seg_len = cfg.segment_length
            seg = (self.ex // seg_len).astype(np.int64)
            idx = np.arange(self.curvature.shape[1])[None, :]
            kappa = np.abs(self.curvature) * self.regime_phase()[:, None]
            sharp = (kappa > _SHARP_CURVATURE) & (idx >= seg[:, None])
            start = np.where(sharp, idx * seg_len, np.inf).min(axis=1)
            gap = np.clip(start - self.ex, 0.0, cap)
            sharpest = np.where(sharp & (idx <= seg[:, None] + 1), kappa, 0.0).max(axis=1)
            v_safe = np.where(sharpest > 0, np.sqrt(cfg.grip / np.maximum(sharpest, 1e-12)), cfg.v_max)
            out[:, 0] = gap
            out[:, 1] = self.ev - v_safe
            out[:, 4] = cfg.half_width - np.abs(self.ey)
            return out
        act = self.oactive
        ex = self.ex[:, None]
        if cfg.archetype == "intersection":
            k = self._next_intersection(self.ex)
            xk = intersection_x(cfg, k)
            near = act & (self.opath == (CROSSING + k)[:, None])
            approach = near & (self.oy < cfg.collision_radius)
            clearance = np.where(approach, np.abs(self.oy), np.inf).min(axis=1)
            busy = clearance < 30.0
            out[:, 0] = np.where(busy, np.clip(xk - cfg.corridor_half_width - self.ex, 0.0, cap), cap)
            out[:, 1] = self.ev
            out[:, 4] = np.minimum(clearance, cap)
            return out
        same = act & (self.opath == self.elane[:, None]) & (self.ox > ex)
        gaps = np.where(same, self.ox - ex, np.inf)
        lead = np.argmin(gaps, axis=1)
        gap = gaps[np.arange(e), lead]
        rel = np.where(np.isfinite(gap), self.ev - self.ov[np.arange(e), lead], 0.0)
        if cfg.archetype == "merge":
            ramp_gap = np.where(self.elane == 0, cfg.ramp_end - self.ex, np.inf)
            use_ramp = ramp_gap < gap
            rel = np.where(use_ramp, self.ev, rel)
            gap = np.minimum(gap, ramp_gap)
        out[:, 0] = np.clip(gap, 0.0, cap)
        out[:, 1] = rel
        adjacent = act & (np.abs(self.opath - self.elane[:, None]) == 1)
        out[:, 4] = np.minimum(np.where(adjacent, np.abs(self.ox - ex), np.inf).min(axis=1), cap)
        return out
