"""Shielded and unshielded rollouts, safety metrics, aggregation and export.

Rollouts are batched: one :class:`TrafficBatch` row per episode, all rows
stepped in lockstep.  Each row's environment randomness is keyed by its seed
alone, so a shielded and an unshielded batch built from the same seeds are
coupled step for step.
"""

from __future__ import annotations

import csv
import gzip
import io
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .shield import (
    DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_EPSILON, DEFAULT_G_MIN, DEFAULT_SMOOTHING, ShieldError,
    admit, budget_threshold, modulation, smooth_density,
)
from .traffic import N_ACTIONS, RegimeSchedule, ScenarioConfig, TrafficBatch, WorldState
from .traffic.world import DEFAULT_WINDOW_RADIUS, _load

METHODS = ("unshielded", "shielded")
CSV_COLUMNS = (
    "scenario", "regime", "method", "seed", "episodes", "collision_rate", "proximity_risk_raw",
    "proximity_risk_norm", "min_distance_mean", "intervention_rate", "infeasibility_count",
    "mean_cum_cost",
)
METRIC_COLUMNS = CSV_COLUMNS[5:]


class HarnessError(ValueError):
    pass


@dataclass(frozen=True)
class ShieldParams:
    budget: float = 1.0
    epsilon: float = DEFAULT_EPSILON
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    g_min: float = DEFAULT_G_MIN
    smoothing: float = DEFAULT_SMOOTHING
    window_radius: float = DEFAULT_WINDOW_RADIUS

    def __post_init__(self):
        if not self.budget >= 0:
            raise ShieldError("budget must be >= 0")
        if not self.epsilon > 0:
            raise ShieldError("epsilon must be > 0")
        if self.alpha < 0 or self.beta < 0:
            raise ShieldError("alpha and beta must be nonnegative")
        if not 0 < self.g_min <= 1:
            raise ShieldError("g_min must lie in (0, 1]")
        if not 0 < self.smoothing <= 1:
            raise ShieldError("smoothing must lie in (0, 1]")
        if not self.window_radius > 0:
            raise ShieldError("window_radius must be positive")


# Per-step arrays of a log, in trace order.  Padding past an episode's end is
# -1 for ints, False for flags and NaN for reals.
_STEP_FIELDS = {
    "state_id": np.int64, "proposed": np.int64, "executed": np.int64,
    "intervened": bool, "infeasible": bool,
    "threshold": float, "threshold_budget": float, "modulation": float, "remaining": float,
    "cost": float, "reward": float, "min_distance": float, "density": float,
}
_ACTION_FIELDS = ("predicted_cost", "predicted_reward")


@dataclass
class EpisodeLog:
    """One episode's trace.  Arrays have length ``len(self)``."""

    scenario: str
    regime: str
    method: str
    seed: int
    horizon: int
    budget: float
    epsilon: float
    start_step: int
    collided: bool
    off_road: bool
    state_id: np.ndarray
    proposed: np.ndarray
    executed: np.ndarray
    intervened: np.ndarray
    infeasible: np.ndarray
    threshold: np.ndarray
    threshold_budget: np.ndarray
    modulation: np.ndarray
    remaining: np.ndarray
    cost: np.ndarray
    reward: np.ndarray
    min_distance: np.ndarray
    density: np.ndarray
    predicted_cost: np.ndarray
    predicted_reward: np.ndarray

    def __len__(self) -> int:
        return len(self.cost)

    @property
    def shielded(self) -> bool:
        return self.method == "shielded"

    @property
    def cumulative_cost(self) -> float:
        return float(self.cost.sum())

    def discounted_return(self, gamma: float) -> float:
        return float(np.sum(self.reward * gamma ** np.arange(len(self))))

    def to_json(self) -> str:
        head = {f.name: getattr(self, f.name) for f in fields(self)
                if f.name not in _STEP_FIELDS and f.name not in _ACTION_FIELDS}
        body = {k: getattr(self, k).tolist() for k in (*_STEP_FIELDS, *_ACTION_FIELDS)}
        return json.dumps({**head, **body}, separators=(",", ":"), allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "EpisodeLog":
        raw = json.loads(text)
        names = {f.name for f in fields(cls)}
        if set(raw) != names:
            missing, extra = names - set(raw), set(raw) - names
            raise HarnessError(f"trace record fields mismatch (missing {sorted(missing)}, extra {sorted(extra)})")
        for k, dtype in _STEP_FIELDS.items():
            raw[k] = np.asarray(raw[k], dtype=dtype)
        n = len(raw["cost"])
        for k in _ACTION_FIELDS:
            raw[k] = np.asarray(raw[k], dtype=float).reshape(n, N_ACTIONS)
        if any(len(raw[k]) != n for k in _STEP_FIELDS):
            raise HarnessError("trace record has ragged step arrays")
        return cls(**raw)


@dataclass
class EpisodeBatch:
    """Columnar logs for episodes run together; step arrays are (E, T)."""

    scenario: str
    regime: str
    method: str
    seeds: np.ndarray
    horizon: int
    budget: float
    epsilon: float
    start_step: int
    length: np.ndarray
    collided: np.ndarray
    off_road: np.ndarray
    steps: dict = field(repr=False)

    def __len__(self) -> int:
        return len(self.seeds)

    def __getattr__(self, name):
        steps = self.__dict__.get("steps")
        if steps is not None and name in steps:
            return steps[name]
        raise AttributeError(name)

    @property
    def valid(self) -> np.ndarray:
        return np.arange(self.steps["cost"].shape[1])[None, :] < self.length[:, None]

    def episode(self, i: int) -> EpisodeLog:
        n = int(self.length[i])
        arrays = {k: v[i, :n].copy() for k, v in self.steps.items()}
        return EpisodeLog(
            scenario=self.scenario, regime=self.regime, method=self.method, seed=int(self.seeds[i]),
            horizon=self.horizon, budget=self.budget, epsilon=self.epsilon, start_step=self.start_step,
            collided=bool(self.collided[i]), off_road=bool(self.off_road[i]), **arrays,
        )

    def episodes(self):
        return [self.episode(i) for i in range(len(self))]

    @classmethod
    def from_logs(cls, logs: Sequence[EpisodeLog]) -> "EpisodeBatch":
        if not logs:
            raise HarnessError("no episode logs")
        first = logs[0]
        for log in logs:
            if (log.method, log.horizon, log.budget, log.epsilon) != (
                    first.method, first.horizon, first.budget, first.epsilon):
                raise HarnessError("logs mix methods or shield settings")
        width = max(max(len(log) for log in logs), 1)
        steps = {}
        for k, dtype in _STEP_FIELDS.items():
            steps[k] = np.full((len(logs), width), _pad(dtype), dtype=dtype)
        for k in _ACTION_FIELDS:
            steps[k] = np.full((len(logs), width, N_ACTIONS), np.nan)
        for i, log in enumerate(logs):
            for k in steps:
                steps[k][i, :len(log)] = getattr(log, k)
        starts = {log.start_step for log in logs}
        return cls(
            scenario=first.scenario, regime=first.regime, method=first.method,
            seeds=np.array([log.seed for log in logs], dtype=np.uint64),
            horizon=first.horizon, budget=first.budget, epsilon=first.epsilon,
            start_step=starts.pop() if len(starts) == 1 else -1,
            length=np.array([len(log) for log in logs]),
            collided=np.array([log.collided for log in logs]),
            off_road=np.array([log.off_road for log in logs]),
            steps=steps,
        )


def _pad(dtype):
    if dtype is bool:
        return False
    if dtype is float:
        return np.nan
    return -1


def run_batch(
    policy,
    use_shield: bool,
    config: ScenarioConfig,
    schedule: RegimeSchedule,
    shield: ShieldParams,
    seeds: Sequence[int],
    initial_state: WorldState | None = None,
) -> EpisodeBatch:
    """Roll out ``policy`` on every seed, with or without the shield.

    ``policy`` is anything with ``act(batch) -> (E,) action ids``; policies that
    also carry a ``discretizer`` get their state ids logged.
    """
    if initial_state is not None:
        if len(seeds) != 1:
            raise HarnessError("an initial state fixes a single episode")
        batch = _load(initial_state, config, schedule)
    else:
        batch = TrafficBatch(config, schedule, seeds)
    e, horizon, start = batch.size, config.horizon, batch.t
    width = horizon - start
    steps = {k: np.full((e, width), _pad(d), dtype=d) for k, d in _STEP_FIELDS.items()}
    for k in _ACTION_FIELDS:
        steps[k] = np.full((e, width, N_ACTIONS), np.nan)
    length = np.zeros(e, dtype=np.int64)
    consumed = np.zeros(e)
    discretizer = getattr(policy, "discretizer", None)

    density = batch.density(shield.window_radius)
    smoothed = density.copy()
    for k in range(width):
        live = ~batch.done
        if not live.any():
            break
        t = start + k
        out = batch.outcomes()
        state_ids = discretizer.encode(batch.features()) if discretizer is not None else None
        proposed = np.asarray(policy.act(batch), dtype=np.int64)
        if use_shield:
            if k > 0:
                smoothed = smooth_density(smoothed, density, shield.smoothing)
            remaining = shield.budget - consumed
            tau_b = budget_threshold(remaining, horizon, t, shield.epsilon)
            g = modulation(density, np.abs(density - smoothed), shield.alpha, shield.beta, shield.g_min)
            tau = tau_b * g
            executed, intervened, infeasible = admit(out.cost, proposed, tau)
        else:
            remaining = tau_b = g = tau = np.full(e, np.nan)
            executed = proposed
            intervened = infeasible = np.zeros(e, dtype=bool)
        rec = batch.commit(out, executed)
        consumed += np.where(live, rec.cost, 0.0)

        row = live
        put = lambda name, value: steps[name][:, k].__setitem__(row, np.asarray(value)[row])  # noqa: E731
        if state_ids is not None:
            put("state_id", state_ids)
        put("proposed", proposed)
        put("executed", executed)
        put("intervened", intervened)
        put("infeasible", infeasible)
        put("threshold", tau)
        put("threshold_budget", tau_b)
        put("modulation", g)
        put("remaining", remaining)
        put("cost", rec.cost)
        put("reward", rec.reward)
        put("min_distance", rec.min_distance)
        put("density", density)
        steps["predicted_cost"][row, k] = out.cost[row]
        steps["predicted_reward"][row, k] = out.reward[row]
        length += live
        density = batch.density(shield.window_radius)

    return EpisodeBatch(
        scenario=config.archetype, regime=schedule.regime, method="shielded" if use_shield else "unshielded",
        seeds=np.asarray([int(s) for s in batch.seeds], dtype=np.uint64), horizon=horizon,
        budget=shield.budget, epsilon=shield.epsilon, start_step=start,
        length=length, collided=batch.collided.copy(), off_road=batch.off_road.copy(), steps=steps,
    )


def run_episode(policy, use_shield: bool, config: ScenarioConfig, schedule: RegimeSchedule,
                shield: ShieldParams, seed: int, initial_state: WorldState | None = None) -> EpisodeLog:
    return run_batch(policy, use_shield, config, schedule, shield, [seed], initial_state).episode(0)


def run_coupled(policy, config: ScenarioConfig, schedule: RegimeSchedule, shield: ShieldParams,
                seeds: Sequence[int]) -> tuple[EpisodeBatch, EpisodeBatch]:
    """(shielded, unshielded) batches sharing every environment draw."""
    return (run_batch(policy, True, config, schedule, shield, seeds),
            run_batch(policy, False, config, schedule, shield, seeds))


# -- metrics ---------------------------------------------------------------------


def _as_batch(logs) -> EpisodeBatch:
    if isinstance(logs, EpisodeBatch):
        if len(logs) == 0:
            raise HarnessError("no episode logs")
        return logs
    logs = list(logs)
    if not logs:
        raise HarnessError("no episode logs")
    return EpisodeBatch.from_logs(logs)


def collision_rate(logs) -> float:
    return float(np.mean(_as_batch(logs).collided))


def proximity_fraction(logs, margin: float) -> float:
    """Mean over episodes of the share of steps with min_distance < margin."""
    b = _as_batch(logs)
    below = (b.min_distance < margin) & b.valid
    per_episode = below.sum(axis=1) / np.maximum(b.length, 1)
    return float(per_episode.mean())


@dataclass(frozen=True)
class ProximityRisk:
    raw: float
    normalized: float
    baseline: float
    flagged: bool


def proximity_risk(logs, margin: float, baseline=None) -> ProximityRisk:
    """Proximity risk of ``logs``, normalized by ``baseline`` (logs or a raw value).

    Without a baseline the logs are their own baseline.  A zero baseline leaves
    the normalized value NaN and sets ``flagged``.
    """
    raw = proximity_fraction(logs, margin)
    if baseline is None:
        base = raw
    elif isinstance(baseline, (int, float)):
        base = float(baseline)
    else:
        base = proximity_fraction(baseline, margin)
    if base == 0:
        return ProximityRisk(raw, math.nan, base, True)
    return ProximityRisk(raw, raw / base, base, False)


def batch_metrics(logs, margin: float) -> dict:
    """Per-seed metrics except the normalized proximity risk."""
    b = _as_batch(logs)
    valid = b.valid
    steps = int(b.length.sum())
    episode_min = np.where(valid, b.min_distance, np.inf).min(axis=1)
    return {
        "episodes": len(b),
        "collision_rate": collision_rate(b),
        "proximity_risk_raw": proximity_fraction(b, margin),
        "min_distance_mean": float(np.mean(episode_min[b.length > 0])) if steps else math.nan,
        "intervention_rate": float(b.intervened[valid].sum() / steps) if steps else 0.0,
        "infeasibility_count": int(b.infeasible[valid].sum()),
        "mean_cum_cost": float(np.where(valid, b.cost, 0.0).sum(axis=1).mean()),
    }


def normalize_proximity(rows: list[dict]) -> list[str]:
    """Fill ``proximity_risk_norm`` in per-seed rows from each cell's unshielded mean.

    Returns the cells whose baseline is zero (their normalized value stays NaN).
    """
    base: dict[tuple, list[float]] = {}
    for r in rows:
        if r["method"] == "unshielded":
            base.setdefault((r["scenario"], r["regime"]), []).append(r["proximity_risk_raw"])
    flags = []
    for key, values in sorted(base.items()):
        if np.mean(values) == 0:
            flags.append(f"{key[0]}/{key[1]}: unshielded proximity risk is 0, normalization skipped")
    for r in rows:
        values = base.get((r["scenario"], r["regime"]))
        if values is None:
            raise HarnessError(f"no unshielded baseline for {r['scenario']}/{r['regime']}")
        mean = float(np.mean(values))
        r["proximity_risk_norm"] = r["proximity_risk_raw"] / mean if mean > 0 else math.nan
    return flags


@dataclass
class MetricsSummary:
    """Mean and population std across seeds per (scenario, regime, method).

    ``by_scenario``/``by_regime``/``grand`` average cell means with equal weight,
    so every breakdown is consistent with the grand mean.
    """

    cells: dict
    by_scenario: dict
    by_regime: dict
    grand: dict
    flags: list

    def grand_mean(self, method: str, metric: str = "collision_rate") -> float:
        return self.grand[method][metric]

    def relative_reduction(self, metric: str = "collision_rate") -> float:
        base = self.grand_mean("unshielded", metric)
        return math.nan if base == 0 else (base - self.grand_mean("shielded", metric)) / base


def aggregate(rows: Iterable[dict]) -> MetricsSummary:
    rows = list(rows)
    if not rows:
        raise HarnessError("no per-seed summaries to aggregate")
    grouped: dict[tuple, list[dict]] = {}
    for r in rows:
        grouped.setdefault((r["scenario"], r["regime"], r["method"]), []).append(r)
    seed_sets = {key: tuple(sorted(str(r["seed"]) for r in group)) for key, group in grouped.items()}
    if len(set(seed_sets.values())) > 1:
        raise HarnessError("cells were run on different seed sets")
    scenarios = sorted({k[0] for k in grouped})
    regimes = sorted({k[1] for k in grouped})
    methods = sorted({k[2] for k in grouped})
    missing = [(s, g, m) for s in scenarios for g in regimes for m in methods if (s, g, m) not in grouped]
    if missing:
        raise HarnessError(f"mismatched cell keys; missing {missing[0]}")

    flags = []
    n_seeds = len(next(iter(seed_sets.values())))
    if n_seeds < 2:
        flags.append("single seed: standard deviations reported as 0")
    cells = {}
    for key, group in sorted(grouped.items()):
        stats = {"episodes": int(sum(r["episodes"] for r in group))}
        for m in METRIC_COLUMNS:
            values = np.array([r.get(m, math.nan) for r in group], dtype=float)
            mean = float(values.mean())
            std = float(values.std()) if n_seeds >= 2 else 0.0
            stats[m] = (mean, std)
        cells[key] = stats

    def average(keys):
        return {m: float(np.mean([cells[k][m][0] for k in keys])) for m in METRIC_COLUMNS}

    by_scenario = {(s, m): average([(s, g, m) for g in regimes]) for s in scenarios for m in methods}
    by_regime = {(g, m): average([(s, g, m) for s in scenarios]) for g in regimes for m in methods}
    grand = {m: average([(s, g, m) for s in scenarios for g in regimes]) for m in methods}
    return MetricsSummary(cells, by_scenario, by_regime, grand, flags)


# -- grid evaluation ----------------------------------------------------------------


@dataclass(frozen=True)
class CellJob:
    policy: object
    config: ScenarioConfig
    schedule: RegimeSchedule
    shield: ShieldParams
    seeds: tuple
    episodes: int
    trace_episodes: int
    audit: object = None


@dataclass
class CellResult:
    scenario: str
    regime: str
    rows: list
    traces: dict
    audits: list


def evaluation_seeds(seed: int, episodes: int) -> list[int]:
    from .policy import episode_seeds
    return episode_seeds(seed, episodes, 2)


def run_cell(job: CellJob) -> CellResult:
    """Both methods on every seed of one (scenario, regime) cell, as one batch each."""
    per_seed = [evaluation_seeds(s, job.episodes) for s in job.seeds]
    flat = [s for group in per_seed for s in group]
    rows, traces, audits = [], {}, []
    for use_shield in (False, True):
        batch = run_batch(job.policy, use_shield, job.config, job.schedule, job.shield, flat)
        if job.audit is not None:
            audits.append(job.audit(batch))
        kept = []
        for i, seed in enumerate(job.seeds):
            lo = i * job.episodes
            part = _take(batch, slice(lo, lo + job.episodes))
            row = {"scenario": batch.scenario, "regime": batch.regime, "method": batch.method, "seed": seed}
            row.update(batch_metrics(part, job.config.safety_margin))
            rows.append(row)
            kept.extend(part.episode(j) for j in range(min(job.trace_episodes, job.episodes)))
        traces[batch.method] = kept
    return CellResult(job.config.archetype, job.schedule.regime, rows, traces, audits)


def _take(batch: EpisodeBatch, index) -> EpisodeBatch:
    return EpisodeBatch(
        scenario=batch.scenario, regime=batch.regime, method=batch.method, seeds=batch.seeds[index],
        horizon=batch.horizon, budget=batch.budget, epsilon=batch.epsilon, start_step=batch.start_step,
        length=batch.length[index], collided=batch.collided[index], off_road=batch.off_road[index],
        steps={k: v[index] for k, v in batch.steps.items()},
    )


def evaluate_grid(jobs: Sequence[CellJob], workers: int = 1) -> list[CellResult]:
    """Run cells, in a process pool when ``workers > 1``; results keep job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [run_cell(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_cell, jobs))


def collect_rows(results: Sequence[CellResult]) -> tuple[list[dict], list[str]]:
    rows = [r for res in results for r in res.rows]
    order = {m: i for i, m in enumerate(METHODS)}
    rows.sort(key=lambda r: (r["scenario"], r["regime"], order[r["method"]], int(r["seed"])))
    flags = normalize_proximity(rows)
    return rows, flags


# -- export ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, float):
        # shortest round-trip form, so re-aggregating a CSV reproduces the in-memory means
        return "nan" if math.isnan(value) else repr(float(value))
    return str(value)


def csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue().encode("utf-8")


def write_file(path: Path, data: bytes) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def summary_rows(summary: MetricsSummary, which: int = 0) -> list[list]:
    """One row per cell; ``which`` 0 selects means, 1 standard deviations."""
    order = {m: i for i, m in enumerate(METHODS)}
    out = []
    for key in sorted(summary.cells, key=lambda k: (k[0], k[1], order.get(k[2], 99))):
        stats = summary.cells[key]
        out.append([*key, "all", stats["episodes"], *(stats[m][which] for m in METRIC_COLUMNS)])
    return out


def export(summary: MetricsSummary, rows: Sequence[dict], traces: Sequence[EpisodeLog], prefix) -> list[Path]:
    """Write metrics CSVs, gzip JSONL traces and SVG charts under ``prefix``.

    Output bytes depend only on the inputs (gzip timestamps are pinned).
    """
    from . import charts

    if not traces:
        raise HarnessError("no episode logs to export")
    root = Path(prefix)
    written = []

    def emit(name, data):
        path = root / name
        write_file(path, data)
        written.append(path)

    emit("metrics.csv", csv_bytes(CSV_COLUMNS, summary_rows(summary, 0)))
    emit("metrics_std.csv", csv_bytes(CSV_COLUMNS, summary_rows(summary, 1)))
    emit("metrics_by_seed.csv", csv_bytes(CSV_COLUMNS, [[r.get(c, math.nan) for c in CSV_COLUMNS] for r in rows]))

    groups: dict[tuple, list[EpisodeLog]] = {}
    for log in traces:
        groups.setdefault((log.scenario, log.regime, log.method), []).append(log)
    for (scenario, regime, method), logs in sorted(groups.items()):
        text = "".join(log.to_json() + "\n" for log in logs).encode("utf-8")
        buf = io.BytesIO()
        with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) as gz:
            gz.write(text)
        emit(f"traces/{scenario}_{regime}_{method}.jsonl.gz", buf.getvalue())

    for name, svg in charts.render_all(summary).items():
        emit(name, svg.encode("utf-8"))
    return written


def read_traces(directory) -> list[EpisodeLog]:
    """Load every ``*.jsonl.gz`` trace under ``directory``; errors name the file."""
    directory = Path(directory)
    files = sorted(directory.glob("*.jsonl.gz"))
    if not files:
        raise HarnessError(f"no trace files in {directory}")
    logs = []
    for path in files:
        try:
            with gzip.open(path, "rt", encoding="utf-8") as fh:
                for n, line in enumerate(fh, 1):
                    if line.strip():
                        try:
                            logs.append(EpisodeLog.from_json(line))
                        except (ValueError, TypeError) as exc:
                            raise HarnessError(f"{path}:{n}: corrupted trace record ({exc})") from exc
        except (OSError, EOFError) as exc:
            raise HarnessError(f"{path}: unreadable trace file ({exc})") from exc
    return logs


def read_metrics(path) -> list[dict]:
    """Rows of a metrics CSV with numeric fields parsed."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise HarnessError(f"{path}: unexpected columns {reader.fieldnames}")
        rows = []
        for r in reader:
            for c in METRIC_COLUMNS:
                r[c] = float(r[c])
            r["episodes"] = int(r["episodes"])
            rows.append(r)
    return rows
