"""Executable checks of the shield's guarantees over episode logs.

Each check returns a :class:`TheoremReport`.  Log audits accept a single
:class:`EpisodeBatch`, a list of batches, or a list of :class:`EpisodeLog`.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .harness import EpisodeBatch, EpisodeLog, ShieldParams, run_coupled
from .traffic import RegimeSchedule, ScenarioConfig

IDENTITY_TOL = 1e-12
ENVELOPE_TOL = 1e-9
MC_SIGMAS = 3.0
MIN_PAIRS = 50


class VerificationError(ValueError):
    """A log or argument violates a checker's precondition."""


@dataclass
class TheoremReport:
    theorem: str
    checked_steps: int = 0
    checked_episodes: int = 0
    violations: int = 0
    worst_case_slack: float = math.inf
    counterexample: tuple | None = None
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def merge(self, other: "TheoremReport") -> "TheoremReport":
        if other.theorem != self.theorem:
            raise VerificationError("cannot merge reports of different checks")
        first = self.counterexample or other.counterexample
        details = dict(self.details)
        for k, v in other.details.items():
            details[k] = details.get(k, 0) + v if isinstance(v, (int, float)) else v
        return TheoremReport(
            self.theorem, self.checked_steps + other.checked_steps,
            self.checked_episodes + other.checked_episodes, self.violations + other.violations,
            min(self.worst_case_slack, other.worst_case_slack), first, details,
        )


def _batches(logs) -> list[EpisodeBatch]:
    if isinstance(logs, EpisodeBatch):
        return [logs]
    logs = list(logs)
    if not logs:
        raise VerificationError("no episode logs")
    if all(isinstance(x, EpisodeBatch) for x in logs):
        return logs
    if all(isinstance(x, EpisodeLog) for x in logs):
        groups: dict[tuple, list[EpisodeLog]] = {}
        for log in logs:
            groups.setdefault((log.method, log.horizon, log.budget, log.epsilon), []).append(log)
        return [EpisodeBatch.from_logs(g) for g in groups.values()]
    raise VerificationError("expected EpisodeBatch or EpisodeLog items")


def _shielded(logs) -> list[EpisodeBatch]:
    batches = _batches(logs)
    for b in batches:
        if b.method != "shielded":
            raise VerificationError(f"{b.scenario}/{b.regime}: checker needs shielded logs, got {b.method}")
    return batches


def _pointer(b: EpisodeBatch, i: int, k: int | None = None) -> tuple:
    ref = (b.scenario, b.regime, int(b.seeds[i]))
    return ref if k is None else (*ref, b.start_step + int(k))


def _executed_cost(b: EpisodeBatch) -> np.ndarray:
    idx = np.where(b.executed >= 0, b.executed, 0)
    return np.take_along_axis(b.predicted_cost, idx[:, :, None], axis=2)[:, :, 0]


def check_local_admissibility(logs) -> TheoremReport:
    """Executed action's predicted cost is within the threshold on every feasible step.

    Infeasible steps are excluded and counted under ``details['infeasible_steps']``.
    """
    report = TheoremReport("local_admissibility", details={"infeasible_steps": 0})
    for b in _shielded(logs):
        valid = b.valid
        if np.isnan(b.threshold[valid]).any():
            raise VerificationError(f"{b.scenario}/{b.regime}: missing threshold records")
        slack = b.threshold - _executed_cost(b)
        audited = valid & ~b.infeasible
        bad = audited & (slack < -IDENTITY_TOL)
        part = TheoremReport(
            "local_admissibility", int(valid.sum()), len(b), int(bad.sum()),
            float(slack[audited].min()) if audited.any() else math.inf,
            details={"infeasible_steps": int((valid & b.infeasible).sum())},
        )
        if bad.any():
            i, k = np.argwhere(bad)[0]
            part.counterexample = _pointer(b, i, k)
        report = report.merge(part)
    return report


def check_feasibility(logs) -> TheoremReport:
    """Every step in which no action met the threshold is a violation of the fallback assumption."""
    report = TheoremReport("fallback_feasibility")
    for b in _shielded(logs):
        valid = b.valid
        bad = valid & b.infeasible
        best = np.where(valid, np.nanmin(np.where(valid[:, :, None], b.predicted_cost, np.inf), axis=2), np.nan)
        slack = b.threshold - best
        part = TheoremReport("fallback_feasibility", int(valid.sum()), len(b), int(bad.sum()),
                             float(np.nanmin(slack[valid])) if valid.any() else math.inf)
        if bad.any():
            i, k = np.argwhere(bad)[0]
            part.counterexample = _pointer(b, i, k)
        report = report.merge(part)
    return report


def check_cumulative_envelope(logs, budget: float | None = None) -> TheoremReport:
    """Per episode: realized cost within the summed thresholds and within the budget.

    ``details['predictor_gap']`` is the largest |realized - predicted| executed cost.
    """
    report = TheoremReport("cumulative_envelope", details={"predictor_gap": 0.0})
    gap = 0.0
    for b in _shielded(logs):
        B = b.budget if budget is None else budget
        if B is None or not B >= 0:
            raise VerificationError("budget must be a nonnegative number")
        valid = b.valid
        if np.isnan(b.threshold[valid]).any():
            raise VerificationError(f"{b.scenario}/{b.regime}: missing threshold records")
        cost = np.where(valid, b.cost, 0.0).sum(axis=1)
        tau = np.where(valid, b.threshold, 0.0).sum(axis=1)
        slack = np.minimum(tau - cost, B - cost)
        bad = slack < -ENVELOPE_TOL
        if valid.any():
            gap = max(gap, float(np.abs(b.cost - _executed_cost(b))[valid].max()))
        part = TheoremReport("cumulative_envelope", int(valid.sum()), len(b), int(bad.sum()),
                             float(slack.min()) if len(b) else math.inf)
        if bad.any():
            part.counterexample = _pointer(b, int(np.argmax(bad)))
        report = report.merge(part)
    report.details["predictor_gap"] = gap
    return report


def check_threshold_monotonicity(logs) -> TheoremReport:
    """Threshold identities recomputed from the logged remaining budget.

    Checks R_t = B - cumulative cost, the projection formula for the budget
    threshold, tau = tau_budget * g, and g <= 1 (so tau <= tau_budget).
    """
    report = TheoremReport("threshold_identity")
    for b in _shielded(logs):
        valid = b.valid
        if np.isnan(b.remaining[valid]).any() or np.isnan(b.threshold[valid]).any():
            raise VerificationError(f"{b.scenario}/{b.regime}: missing threshold records")
        t = b.start_step + np.arange(b.remaining.shape[1])[None, :]
        cost = np.where(valid, b.cost, 0.0)
        consumed = np.zeros_like(cost)
        consumed[:, 1:] = np.cumsum(cost, axis=1)[:, :-1]
        if b.start_step == 0:
            err_r = np.abs(b.remaining - (b.budget - consumed))
        else:
            err_r = np.abs(b.remaining - (b.remaining[:, :1] - consumed))
        expected = np.maximum(b.remaining, 0.0) / (b.horizon - t + b.epsilon)
        err_b = np.abs(b.threshold_budget - expected)
        err_tau = np.abs(b.threshold - b.threshold_budget * b.modulation)
        under = 1.0 - b.modulation
        worst = np.maximum.reduce([err_r, err_b, err_tau])
        slack = np.minimum(IDENTITY_TOL - worst, under)
        bad = valid & ((worst > IDENTITY_TOL) | (under < -IDENTITY_TOL) | (b.threshold > b.threshold_budget + IDENTITY_TOL))
        part = TheoremReport("threshold_identity", int(valid.sum()), len(b), int(bad.sum()),
                             float(slack[valid].min()) if valid.any() else math.inf)
        if bad.any():
            i, k = np.argwhere(bad)[0]
            part.counterexample = _pointer(b, i, k)
        report = report.merge(part)
    return report


# -- value gap ------------------------------------------------------------------------


def value_gap_bound(eta: float, delta_r: float, gamma: float) -> float:
    if not 0 <= gamma < 1:
        raise VerificationError(f"gamma must lie in [0, 1), got {gamma}")
    return eta * delta_r / (1.0 - gamma)


def reward_range(config: ScenarioConfig) -> float:
    """Width of the one-step reward range, for the a priori form of the bound."""
    worst = config.lane_change_penalty + config.accel_penalty + max(config.collision_penalty,
                                                                     config.offroad_penalty)
    return config.progress_reward + worst


def _discounted(b: EpisodeBatch, gamma: float) -> np.ndarray:
    width = b.reward.shape[1]
    return np.where(b.valid, b.reward, 0.0) @ (gamma ** np.arange(width))


def value_gap_from_logs(shielded: EpisodeBatch, unshielded: EpisodeBatch, gamma: float,
                        reward_width: float | None = None) -> TheoremReport:
    """Value-gap check from coupled logs paired by episode seed."""
    if not 0 <= gamma < 1:
        raise VerificationError(f"gamma must lie in [0, 1), got {gamma}")
    if shielded.method != "shielded" or unshielded.method != "unshielded":
        raise VerificationError("need one shielded and one unshielded batch")
    if shielded.start_step != unshielded.start_step:
        raise VerificationError("coupled batches start at different steps")
    order_s = np.argsort(shielded.seeds, kind="stable")
    order_u = np.argsort(unshielded.seeds, kind="stable")
    if not np.array_equal(shielded.seeds[order_s], unshielded.seeds[order_u]):
        raise VerificationError("shielded and unshielded logs are not paired by seed")
    n = len(shielded)
    if n < MIN_PAIRS:
        raise VerificationError(f"need at least {MIN_PAIRS} coupled pairs, got {n}")
    diff = _discounted(shielded, gamma)[order_s] - _discounted(unshielded, gamma)[order_u]
    gap = float(diff.mean())
    se = float(diff.std(ddof=1) / math.sqrt(n))
    valid = shielded.valid
    hits = valid & shielded.intervened
    eta = float(hits.sum(axis=0).max() / n) if hits.any() else 0.0
    if hits.any():
        pr = shielded.predicted_reward
        rows = np.take_along_axis(pr, np.where(shielded.executed >= 0, shielded.executed, 0)[:, :, None], 2)[:, :, 0]
        prop = np.take_along_axis(pr, np.where(shielded.proposed >= 0, shielded.proposed, 0)[:, :, None], 2)[:, :, 0]
        delta_r = float(np.abs(rows - prop)[hits].max())
    else:
        delta_r = 0.0
    bound = value_gap_bound(eta, delta_r, gamma)
    slack = bound + MC_SIGMAS * se - abs(gap)
    report = TheoremReport(
        "value_gap", int(valid.sum() + unshielded.valid.sum()), n, int(slack < 0), slack,
        details={"gap": gap, "standard_error": se, "eta": eta, "delta_r": delta_r, "bound": bound,
                 "gamma": gamma},
    )
    if reward_width is not None:
        report.details["a_priori_bound"] = value_gap_bound(eta, reward_width, gamma)
    if slack < 0:
        report.counterexample = (shielded.scenario, shielded.regime)
    return report


def check_value_gap_bound(policy, config: ScenarioConfig, schedule: RegimeSchedule, shield: ShieldParams,
                          seeds: Sequence[int], gamma: float = 0.9) -> TheoremReport:
    """Run coupled rollouts on ``seeds`` and check the discounted-return gap."""
    if not 0 <= gamma < 1:
        raise VerificationError(f"gamma must lie in [0, 1), got {gamma}")
    if len(seeds) < MIN_PAIRS:
        raise VerificationError(f"need at least {MIN_PAIRS} coupled pairs, got {len(seeds)}")
    shielded, unshielded = run_coupled(policy, config, schedule, shield, seeds)
    return value_gap_from_logs(shielded, unshielded, gamma, reward_range(config))


def value_gap_from_traces(logs: Sequence[EpisodeLog], gamma: float) -> list[tuple[str, TheoremReport]]:
    """``(scenario/regime, report)`` for every cell of a trace set."""
    cells: dict[tuple, dict[str, list[EpisodeLog]]] = {}
    for log in logs:
        cells.setdefault((log.scenario, log.regime), {}).setdefault(log.method, []).append(log)
    out = []
    for key, methods in sorted(cells.items()):
        if set(methods) != {"shielded", "unshielded"}:
            raise VerificationError(f"{key[0]}/{key[1]}: traces lack a coupled method pair")
        out.append((f"{key[0]}/{key[1]}", value_gap_from_logs(EpisodeBatch.from_logs(methods["shielded"]),
                                                              EpisodeBatch.from_logs(methods["unshielded"]), gamma)))
    return out


# -- reporting -------------------------------------------------------------------------

REPORT_COLUMNS = ("check", "scope", "checked_steps", "checked_episodes", "violations",
                  "worst_case_slack", "counterexample")


def reports_csv(reports: Sequence[tuple[str, TheoremReport]]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for scope, r in reports:
        ce = "" if r.counterexample is None else "/".join(str(x) for x in r.counterexample)
        w.writerow([r.theorem, scope, r.checked_steps, r.checked_episodes, r.violations,
                    f"{r.worst_case_slack:.6g}", ce])
    return buf.getvalue().encode("utf-8")


def reports_text(reports: Sequence[tuple[str, TheoremReport]]) -> str:
    lines = []
    for scope, r in reports:
        status = "PASS" if r.passed else "FAIL"
        line = (f"{status} {r.theorem:<22} {scope:<24} steps={r.checked_steps} "
                f"episodes={r.checked_episodes} violations={r.violations} slack={r.worst_case_slack:.4g}")
        if r.theorem == "value_gap":
            d = r.details
            line += f" gap={d['gap']:.4f} bound={d['bound']:.4f} se={d['standard_error']:.4f}"
        if r.counterexample is not None:
            line += " at " + "/".join(str(x) for x in r.counterexample)
        lines.append(line)
    return "\n".join(lines) + "\n"
