import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpss.traffic import (
    ACCELERATE, ACTIONS, ARCHETYPES, DECELERATE, KEEP, LANE_LEFT, REGIMES, ConfigurationError,
    RegimeSchedule, TrafficBatch, VehicleState, default_scenario, density_estimate, predict_costs,
    proximity_cost, reset, step,
)
from cpss.traffic.scenario import multipliers

STATIONARY = RegimeSchedule()


def quiet(archetype="highway", **kw):
    return default_scenario(archetype, spawn_rate_base=0.0, **kw)


def car(x, y=0.0, speed=20.0, lane=0, cruise=None):
    return VehicleState((x, y), (speed, 0.0), lane, cruise_speed=speed if cruise is None else cruise, path=lane)


def scene(config, others, ego=None, seed=0):
    base = reset(config, STATIONARY, seed)
    return dataclasses.replace(base, ego=ego or car(0.0), others=tuple(others))


# -- proximity cost -------------------------------------------------------------------

@pytest.mark.parametrize("d, expected", [(20.0, 0.0), (15.0, 0.0), (7.5, 0.5), (10.0, 1 / 3), (0.0, 1.0)])
def test_proximity_cost_values(d, expected):
    assert proximity_cost(d, 15.0) == pytest.approx(expected)


@given(st.floats(0, 200), st.floats(0, 200), st.floats(0.1, 50))
def test_proximity_cost_is_nonincreasing_and_bounded(d1, d2, m):
    lo, hi = sorted((d1, d2))
    assert 0.0 <= proximity_cost(hi, m) <= proximity_cost(lo, m) <= 1.0


def test_proximity_cost_rejects_bad_input():
    with pytest.raises(ValueError):
        proximity_cost(-1.0, 15.0)
    with pytest.raises(ValueError):
        proximity_cost(1.0, 0.0)


# -- reset ----------------------------------------------------------------------------

@pytest.mark.parametrize("archetype", ARCHETYPES)
def test_reset_is_deterministic(archetype):
    cfg = default_scenario(archetype)
    assert reset(cfg, RegimeSchedule("high"), 42) == reset(cfg, RegimeSchedule("high"), 42)
    assert reset(cfg, STATIONARY, 1) != reset(cfg, STATIONARY, 2) or archetype == "track"


def test_reset_highway_lane_in_bounds():
    cfg = default_scenario("highway", lane_count=3)
    lanes = {reset(cfg, STATIONARY, s).ego.lane_index for s in range(40)}
    assert lanes <= {0, 1, 2}
    assert len(lanes) > 1


@pytest.mark.parametrize("archetype", ARCHETYPES)
def test_reset_without_traffic(archetype):
    assert reset(quiet(archetype), STATIONARY, 3).others == ()


@pytest.mark.parametrize("kw", [dict(lane_count=0), dict(archetype="roundabout"), dict(safety_margin=1.0),
                                dict(spawn_rate_base=-1.0)])
def test_invalid_config_rejected(kw):
    kw = {"archetype": "highway", **kw}
    with pytest.raises(ConfigurationError):
        default_scenario(kw.pop("archetype"), **kw)


def test_unknown_regime_rejected():
    with pytest.raises(ConfigurationError):
        RegimeSchedule("chaotic")


# -- step -----------------------------------------------------------------------------

def test_lone_ego_has_no_cost():
    cfg = quiet()
    out = step(reset(cfg, STATIONARY, 0), KEEP, cfg, STATIONARY)
    assert out.cost == 0.0
    assert out.min_distance == cfg.distance_cap
    assert out.density == 0.0


def test_cost_at_ten_meters():
    cfg = quiet()
    out = step(scene(cfg, [car(10.0)]), KEEP, cfg, STATIONARY)
    assert out.min_distance == pytest.approx(10.0)
    assert out.cost == pytest.approx((15 - 10) / 15)


def test_contact_saturates_cost():
    cfg = quiet()
    out = step(scene(cfg, [car(0.0)]), KEEP, cfg, STATIONARY)
    assert out.next_state.collided and out.done
    assert out.cost == 1.0


def test_action_out_of_range():
    cfg = quiet()
    with pytest.raises(ValueError):
        step(reset(cfg, STATIONARY, 0), 5, cfg, STATIONARY)
    with pytest.raises(ValueError):
        predict_costs(reset(cfg, STATIONARY, 0), [0, 9], cfg)


def test_leaving_the_road():
    cfg = quiet(lane_count=2)
    out = step(scene(cfg, [], ego=car(0.0, 4.0, lane=1)), LANE_LEFT, cfg, STATIONARY)
    assert out.next_state.off_road and out.done
    assert out.reward < 0


def test_track_boundary_hit():
    cfg = default_scenario("track")
    state = reset(cfg, STATIONARY, 5)
    state = dataclasses.replace(state, ego=VehicleState((0.0, 2.8), (20.0, 0.0), 0))
    out = step(state, LANE_LEFT, cfg, STATIONARY)
    assert out.next_state.collided and out.next_state.off_road
    assert out.cost == 1.0


def test_episode_ends_at_horizon():
    cfg = quiet(horizon=3)
    state = reset(cfg, STATIONARY, 0)
    for _ in range(3):
        out = step(state, KEEP, cfg, STATIONARY)
        state = out.next_state
    assert out.done and not state.collided
    with pytest.raises(ValueError):
        step(state, KEEP, cfg, STATIONARY)


@pytest.mark.parametrize("archetype", ARCHETYPES)
def test_step_trace_is_deterministic(archetype):
    cfg = default_scenario(archetype)
    schedule = RegimeSchedule("high")

    def trace():
        state, out = reset(cfg, schedule, 9), []
        for t in range(25):
            o = step(state, [ACCELERATE, KEEP, LANE_LEFT, DECELERATE][t % 4], cfg, schedule)
            out.append((o.cost, o.reward, o.min_distance, o.density, o.next_state))
            if o.done:
                break
            state = o.next_state
        return out

    assert trace() == trace()


# -- predictor --------------------------------------------------------------------------

def test_predictor_alone_is_zero():
    cfg = quiet()
    middle = scene(cfg, [], ego=car(0.0, 4.0, lane=1))
    assert predict_costs(middle, ACTIONS, cfg) == {a: 0.0 for a in ACTIONS}
    # a road exit is unsafe even without neighbors
    edge = scene(cfg, [], ego=car(0.0, 8.0, lane=2))
    assert predict_costs(edge, ACTIONS, cfg)[LANE_LEFT] == 1.0


def test_predictor_orders_closing_vehicle():
    cfg = quiet()
    state = scene(cfg, [car(20.0, speed=0.0)])
    pred = predict_costs(state, ACTIONS, cfg)
    # brute-force one-step rollout: accelerate ends 9 m short, keep 10 m, braking stops the ego
    assert pred[ACCELERATE] == pytest.approx(6 / 15)
    assert pred[KEEP] == pytest.approx(5 / 15)
    assert pred[DECELERATE] == 0.0
    assert pred[ACCELERATE] > pred[DECELERATE]


def test_predictor_exact_on_static_scene():
    cfg = quiet()
    state = scene(cfg, [car(25.0, speed=0.0), car(12.0, 4.0, speed=0.0, lane=1)])
    pred = predict_costs(state, ACTIONS, cfg)
    for a in ACTIONS:
        assert step(state, a, cfg, STATIONARY).cost == pred[a]


@settings(max_examples=25, deadline=None)
@given(archetype=st.sampled_from(ARCHETYPES), regime=st.sampled_from(REGIMES), seed=st.integers(0, 2**63 - 1),
       actions=st.lists(st.sampled_from(ACTIONS), min_size=1, max_size=30))
def test_predictor_matches_realized_cost(archetype, regime, seed, actions):
    cfg = default_scenario(archetype)
    schedule = RegimeSchedule(regime)
    state = reset(cfg, schedule, seed)
    for a in actions:
        pred = predict_costs(state, ACTIONS, cfg, schedule)
        out = step(state, a, cfg, schedule)
        assert out.cost == pred[a]
        assert out.cost == proximity_cost(out.min_distance, cfg.safety_margin)
        if out.cost > 0:
            assert out.min_distance < cfg.safety_margin
        if out.next_state.collided:
            assert out.cost >= 1 - cfg.collision_radius / cfg.safety_margin
        if not out.next_state.off_road and archetype != "track":
            assert 0 <= out.next_state.ego.lane_index < cfg.lane_count
            assert out.next_state.ego.position[1] == cfg.lane_center(out.next_state.ego.lane_index)
        assert 0 <= out.next_state.ego.speed <= cfg.v_max
        if out.done:
            break
        state = out.next_state


# -- density ----------------------------------------------------------------------------

def test_density_empty():
    cfg = quiet()
    assert density_estimate(reset(cfg, STATIONARY, 0), 50.0) == 0.0


def test_density_counts_per_hundred_meters():
    cfg = quiet()
    state = scene(cfg, [car(30.0), car(-60.0), car(90.0, 4.0, lane=1), car(150.0)])
    assert density_estimate(state, 100.0) == 3.0


def test_density_window_is_closed():
    cfg = quiet()
    state = scene(cfg, [car(50.0)])
    assert density_estimate(state, 50.0) == 2.0
    with pytest.raises(ValueError):
        density_estimate(state, 0.0)


@pytest.mark.parametrize("archetype", ["merge", "highway", "intersection"])
def test_batch_density_agrees_with_snapshot(archetype):
    cfg = default_scenario(archetype)
    batch = TrafficBatch(cfg, STATIONARY, [3])
    for _ in range(10):
        batch.commit(batch.outcomes(np.array([[KEEP]])))
    from cpss.traffic.world import _snapshot
    assert batch.density(50.0)[0] == density_estimate(_snapshot(batch), 50.0)


# -- regimes ------------------------------------------------------------------------------

@given(regime=st.sampled_from(REGIMES), seed=st.integers(0, 2**32 - 1), horizon=st.integers(1, 400))
def test_multiplier_bounds(regime, seed, horizon):
    m = multipliers(RegimeSchedule(regime), np.random.default_rng(seed), horizon)
    assert m.shape == (horizon,)
    assert np.all((m >= 0.25) & (m <= 4.0))
    if regime == "stationary":
        assert np.all(m == 1.0)


def test_average_regime_uses_listed_levels():
    m = multipliers(RegimeSchedule("average"), np.random.default_rng(0), 400)
    assert set(np.unique(m)) <= {0.5, 1.0, 1.5, 2.0}
    assert len(np.unique(m)) > 1


def test_regime_is_part_of_the_episode_stream():
    cfg = default_scenario("highway")
    a = TrafficBatch(cfg, RegimeSchedule("high"), [11, 12])
    b = TrafficBatch(cfg, RegimeSchedule("high"), [11])
    assert np.array_equal(a.mult[0], b.mult[0])
    assert np.array_equal(a.draws[0], b.draws[0])
