import dataclasses
import gzip
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpss.harness import (
    CSV_COLUMNS, CellJob, EpisodeBatch, EpisodeLog, HarnessError, ShieldParams, aggregate, batch_metrics,
    collect_rows, collision_rate, csv_bytes, evaluate_grid, export, proximity_risk, read_metrics, read_traces, run_batch,
    run_coupled, run_episode,
)
from cpss.policy import ScriptedAggressive
from cpss.traffic import (
    ARCHETYPES, KEEP, REGIMES, RegimeSchedule, TrafficBatch, VehicleState, default_scenario, reset,
)

STATIONARY = RegimeSchedule()
SHIELD = ShieldParams()


class Constant:
    def __init__(self, action):
        self.action = action

    def act(self, batch):
        return np.full(batch.size, self.action)


def blocked_lane():
    """Ego at 20 m/s, 60 m behind a stopped car in its lane, no other traffic."""
    cfg = default_scenario("highway", spawn_rate_base=0.0, horizon=40)
    base = reset(cfg, STATIONARY, 0)
    ego = VehicleState((0.0, 4.0), (20.0, 0.0), 1)
    wall = VehicleState((60.0, 4.0), (0.0, 0.0), 1, cruise_speed=0.0, path=1)
    return cfg, dataclasses.replace(base, ego=ego, others=(wall,))


# -- run_episode ----------------------------------------------------------------------

def test_aggressive_unshielded_collides():
    cfg, scene = blocked_lane()
    log = run_episode(ScriptedAggressive(cfg.v_max), False, cfg, STATIONARY, SHIELD, 0, scene)
    assert log.collided
    assert not log.intervened.any()
    assert np.array_equal(log.executed, log.proposed)


def test_aggressive_shielded_stops_short():
    cfg, scene = blocked_lane()
    log = run_episode(ScriptedAggressive(cfg.v_max), True, cfg, STATIONARY, SHIELD, 0, scene)
    assert not log.collided
    assert len(log) == cfg.horizon
    assert log.intervened.mean() > 0
    assert not log.infeasible.any()
    assert log.cumulative_cost <= SHIELD.budget


@pytest.mark.parametrize("use_shield", [False, True])
# the merge ramp ends in a barrier and the track curves, so only these two have a hazard-free road
@pytest.mark.parametrize("archetype", ["highway", "intersection"])
def test_empty_road_has_no_cost(archetype, use_shield):
    cfg = default_scenario(archetype, spawn_rate_base=0.0)
    log = run_episode(Constant(KEEP), use_shield, cfg, STATIONARY, SHIELD, 4)
    assert log.cumulative_cost == 0.0
    assert not log.intervened.any()
    assert not log.collided


def test_unshielded_log_has_no_threshold():
    cfg = default_scenario("highway")
    log = run_episode(Constant(KEEP), False, cfg, STATIONARY, SHIELD, 1)
    assert np.isnan(log.threshold).all()
    assert log.budget == SHIELD.budget


def test_initial_state_needs_one_seed():
    cfg, scene = blocked_lane()
    with pytest.raises(HarnessError):
        run_batch(Constant(KEEP), True, cfg, STATIONARY, SHIELD, [0, 1], scene)


# -- log invariants ---------------------------------------------------------------------

@settings(max_examples=12, deadline=None)
@given(archetype=st.sampled_from(ARCHETYPES), regime=st.sampled_from(REGIMES), seed=st.integers(0, 2**40))
def test_log_invariants(archetype, regime, seed):
    cfg = default_scenario(archetype, horizon=60)
    schedule = RegimeSchedule(regime)
    policy = ScriptedAggressive(cfg.v_max)
    sh, un = run_coupled(policy, cfg, schedule, SHIELD, [seed, seed + 1, seed + 2])
    for b in (sh, un):
        assert np.all(b.length <= cfg.horizon)
        for log in b.episodes():
            assert log.cumulative_cost == pytest.approx(float(np.sum(log.cost)), abs=0)
            assert np.all((log.cost >= 0) & (log.cost <= 1))
            # realized cost is the one-step prediction for the executed action
            assert np.array_equal(log.cost, log.predicted_cost[np.arange(len(log)), log.executed])
            if len(log) < cfg.horizon:
                assert log.collided or log.off_road
    for log in sh.episodes():
        # shield accounting: the logged remaining budget tracks realized cost
        consumed = SHIELD.budget - log.remaining
        assert consumed[0] == 0.0
        assert np.allclose(consumed[1:], np.cumsum(log.cost)[:-1], rtol=0, atol=1e-12)


def test_coupling_fidelity():
    cfg = default_scenario("highway")
    schedule = RegimeSchedule("high")
    seeds = [21, 22, 23, 24]
    sh, un = run_coupled(ScriptedAggressive(cfg.v_max), cfg, schedule, SHIELD, seeds)
    a = TrafficBatch(cfg, schedule, seeds)
    b = TrafficBatch(cfg, schedule, seeds)
    assert np.array_equal(a.mult, b.mult)
    assert np.array_equal(a.draws, b.draws)
    for i in range(len(seeds)):
        # identical up to the first step where the executed actions differ
        split = np.flatnonzero(sh.executed[i] != un.executed[i])
        k = split[0] if len(split) else min(sh.length[i], un.length[i])
        assert np.array_equal(sh.density[i, :k + 1], un.density[i, :k + 1]) or k == 0
        assert np.array_equal(sh.predicted_cost[i, :k + 1], un.predicted_cost[i, :k + 1])


def test_batch_equals_single_episodes():
    cfg = default_scenario("merge")
    policy = ScriptedAggressive(cfg.v_max)
    batch = run_batch(policy, True, cfg, RegimeSchedule("mild"), SHIELD, [5, 6, 7])
    for i, seed in enumerate([5, 6, 7]):
        one = run_episode(policy, True, cfg, RegimeSchedule("mild"), SHIELD, seed)
        got = batch.episode(i)
        for name in ("cost", "executed", "threshold", "density", "predicted_cost"):
            assert np.array_equal(getattr(got, name), getattr(one, name), equal_nan=True)


def test_trace_json_round_trip():
    cfg = default_scenario("intersection")
    log = run_episode(ScriptedAggressive(cfg.v_max), True, cfg, RegimeSchedule("average"), SHIELD, 3)
    back = EpisodeLog.from_json(log.to_json())
    for f in dataclasses.fields(EpisodeLog):
        a, b = getattr(log, f.name), getattr(back, f.name)
        if isinstance(a, np.ndarray):
            assert np.array_equal(a, b, equal_nan=True) and a.dtype == b.dtype
        else:
            assert a == b


def test_trace_json_rejects_missing_field():
    cfg = default_scenario("highway")
    text = run_episode(Constant(KEEP), True, cfg, STATIONARY, SHIELD, 0).to_json().replace('"threshold"', '"thresh"')
    with pytest.raises(HarnessError):
        EpisodeLog.from_json(text)


# -- metrics -----------------------------------------------------------------------------

def fake_logs(n, collided=0, below=None, steps=10, method="unshielded"):
    """``n`` logs; the first ``collided`` collide; ``below[i]`` steps of log i sit inside 15 m."""
    logs = []
    for i in range(n):
        k = 0 if below is None else below[i]
        md = np.where(np.arange(steps) < k, 5.0, 50.0)
        z = np.zeros(steps)
        logs.append(EpisodeLog(
            "highway", "stationary", method, i, steps, 1.0, 0.01, 0, i < collided, False,
            np.zeros(steps, np.int64), z.astype(np.int64), z.astype(np.int64), z.astype(bool), z.astype(bool),
            z, z, z + 1, z, z, z, md, z, np.zeros((steps, 5)), np.zeros((steps, 5)),
        ))
    return logs


@pytest.mark.parametrize("n, k, expected", [(100, 3, 0.03), (10, 0, 0.0), (7, 7, 1.0)])
def test_collision_rate(n, k, expected):
    logs = fake_logs(n, collided=k)
    assert collision_rate(logs) == expected
    assert collision_rate(logs) == sum(log.collided for log in logs) / n


def test_collision_rate_empty():
    with pytest.raises(HarnessError):
        collision_rate([])


def test_proximity_risk_self_normalized():
    logs = fake_logs(4, below=[2, 5, 0, 3])
    risk = proximity_risk(logs, 15.0)
    assert risk.normalized == 1.0
    assert risk.raw == pytest.approx((0.2 + 0.5 + 0.0 + 0.3) / 4)


def test_proximity_risk_one_tenth():
    base = fake_logs(5, below=[10] * 5, steps=10)
    shielded = fake_logs(5, below=[1] * 5, steps=10, method="shielded")
    assert proximity_risk(shielded, 15.0, base).normalized == pytest.approx(0.1)


def test_proximity_risk_zero_baseline_flagged():
    risk = proximity_risk(fake_logs(3), 15.0)
    assert risk.raw == 0.0
    assert risk.flagged and math.isnan(risk.normalized)


def seed_row(scenario, regime, method, seed, rate):
    return {"scenario": scenario, "regime": regime, "method": method, "seed": seed, "episodes": 200,
            "collision_rate": rate, "proximity_risk_raw": rate, "proximity_risk_norm": 1.0,
            "min_distance_mean": 30.0, "intervention_rate": 0.0, "infeasibility_count": 0, "mean_cum_cost": 0.0}


def test_aggregate_grand_mean_over_regimes():
    rows = [seed_row("merge", g, "unshielded", s, r)
            for g, r in zip(REGIMES, (0.10, 0.12, 0.20, 0.025)) for s in (0, 1)]
    summary = aggregate(rows)
    assert summary.grand["unshielded"]["collision_rate"] == pytest.approx(0.11125, abs=1e-15)
    assert summary.by_scenario[("merge", "unshielded")]["collision_rate"] == pytest.approx(0.11125, abs=1e-15)
    # identical values per seed -> zero deviation
    assert all(c["collision_rate"][1] == 0.0 for c in summary.cells.values())
    assert summary.flags == []


def test_aggregate_population_std():
    rows = [seed_row("track", "high", "shielded", s, r) for s, r in enumerate((0.1, 0.3))]
    mean, std = aggregate(rows).cells[("track", "high", "shielded")]["collision_rate"]
    assert mean == pytest.approx(0.2) and std == pytest.approx(0.1)


def test_aggregate_single_seed_flagged():
    summary = aggregate([seed_row("track", "high", "shielded", 0, 0.4)])
    assert summary.cells[("track", "high", "shielded")]["collision_rate"] == (0.4, 0.0)
    assert summary.flags


def test_aggregate_rejects_mismatched_keys():
    rows = [seed_row("merge", "high", "shielded", 0, 0.1), seed_row("merge", "mild", "unshielded", 0, 0.1)]
    with pytest.raises(HarnessError):
        aggregate(rows)
    with pytest.raises(HarnessError):
        aggregate([seed_row("merge", "high", "shielded", 0, 0.1), seed_row("merge", "high", "unshielded", 1, 0.1)])
    with pytest.raises(HarnessError):
        aggregate([])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=16 * 2 * 3, max_size=16 * 2 * 3))
def test_breakdowns_consistent_with_grand_mean(values):
    it = iter(values)
    rows = [seed_row(a, g, m, s, next(it)) for a in ARCHETYPES for g in REGIMES
            for m in ("unshielded", "shielded") for s in range(3)]
    summary = aggregate(rows)
    for m in ("unshielded", "shielded"):
        grand = summary.grand[m]["collision_rate"]
        assert 0 <= grand <= 1
        assert np.mean([summary.by_scenario[(a, m)]["collision_rate"] for a in ARCHETYPES]) == pytest.approx(grand)
        assert np.mean([summary.by_regime[(g, m)]["collision_rate"] for g in REGIMES]) == pytest.approx(grand)
    assert all(c[k][1] >= 0 for c in summary.cells.values() for k in ("collision_rate", "mean_cum_cost"))


# -- grid and export ------------------------------------------------------------------------

def small_grid(workers=1, episodes=6):
    jobs = []
    for a in ARCHETYPES:
        cfg = default_scenario(a, horizon=30)
        for g in REGIMES:
            jobs.append(CellJob(ScriptedAggressive(cfg.v_max), cfg, RegimeSchedule(g), SHIELD, (0, 1), episodes, 2))
    results = evaluate_grid(jobs, workers)
    rows, flags = collect_rows(results)
    traces = [log for res in results for m in ("unshielded", "shielded") for log in res.traces[m]]
    return aggregate(rows), rows, traces


@pytest.fixture(scope="module")
def grid():
    return small_grid()


def test_metrics_in_range(grid):
    summary, rows, _ = grid
    for r in rows:
        assert 0 <= r["collision_rate"] <= 1
        assert 0 <= r["intervention_rate"] <= 1
        assert r["infeasibility_count"] == 0
        assert r["min_distance_mean"] >= 0
        if r["method"] == "unshielded":
            assert r["intervention_rate"] == 0.0


def test_export_cardinality_and_determinism(grid, tmp_path):
    summary, rows, traces = grid
    export(summary, rows, traces, tmp_path / "a")
    export(summary, rows, traces, tmp_path / "b")
    lines = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 1 + 32
    assert len((tmp_path / "a" / "metrics_by_seed.csv").read_text().splitlines()) == 1 + 32 * 2
    for name in ("metrics.csv", "metrics_std.csv", "metrics_by_seed.csv", "collision_by_regime.svg",
                 "collision_by_scenario.svg", "metrics_summary.svg", "traces/merge_high_shielded.jsonl.gz"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    svg = (tmp_path / "a" / "metrics_summary.svg").read_text()
    assert svg.startswith("<svg") and "href" not in svg


def test_export_round_trip(grid, tmp_path):
    summary, rows, traces = grid
    export(summary, rows, traces, tmp_path)
    back = aggregate(read_metrics(tmp_path / "metrics_by_seed.csv"))
    assert back.cells == summary.cells
    logs = read_traces(tmp_path / "traces")
    assert len(logs) == len(traces)


def test_export_needs_logs(grid, tmp_path):
    summary, rows, _ = grid
    with pytest.raises(HarnessError):
        export(summary, rows, [], tmp_path)


def test_export_reports_path_on_io_error(grid, tmp_path):
    summary, rows, traces = grid
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="file"):
        export(summary, rows, traces, blocker / "out")


def test_worker_pool_matches_serial(grid):
    _, rows, _ = grid
    _, rows2, _ = small_grid(workers=2)
    as_csv = lambda rs: csv_bytes(CSV_COLUMNS, [[r[c] for c in CSV_COLUMNS] for r in rs])  # noqa: E731
    assert as_csv(rows2) == as_csv(rows)


def test_read_traces_names_corrupted_file(tmp_path):
    (tmp_path / "bad.jsonl.gz").write_bytes(b"not gzip")
    with pytest.raises(HarnessError, match="bad.jsonl.gz"):
        read_traces(tmp_path)
    path = tmp_path / "bad.jsonl.gz"
    with gzip.open(path, "wt") as fh:
        fh.write("{\"scenario\": 1}\n")
    with pytest.raises(HarnessError, match="bad.jsonl.gz:1"):
        read_traces(tmp_path)


def test_read_traces_empty_dir(tmp_path):
    with pytest.raises(HarnessError):
        read_traces(tmp_path)


def test_metrics_scan_matches_batch(grid):
    _, _, traces = grid
    shielded = [t for t in traces if t.method == "shielded" and t.scenario == "merge"]
    m = batch_metrics(shielded, 15.0)
    assert m["collision_rate"] == np.mean([t.collided for t in shielded])
    assert m["mean_cum_cost"] == pytest.approx(np.mean([t.cumulative_cost for t in shielded]))
    assert isinstance(EpisodeBatch.from_logs(shielded).steps, dict)
