"""Monte Carlo runs of the three guarantee checks outside the CLI.

Uses trained policies when ``--policies`` is given, else the scripted
always-accelerate driver.  ``--brake-decel`` replaces the one-step emergency
brake with a weaker one, which makes infeasible steps show up.
"""

import argparse
from dataclasses import replace
from pathlib import Path

from cpss.config import load
from cpss.harness import run_batch
from cpss.policy import ScriptedAggressive, episode_seeds, load_qtable
from cpss.traffic import RegimeSchedule, default_scenario
from cpss.verifier import (
    check_cumulative_envelope, check_feasibility, check_local_admissibility, check_threshold_monotonicity,
    check_value_gap_bound, reports_text,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/default.json")
    ap.add_argument("--policies", type=Path)
    ap.add_argument("--episodes", type=int, default=100)
    ap.add_argument("--budget", type=float)
    ap.add_argument("--brake-decel", type=float)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = load(args.config)
    shield = cfg.shield if args.budget is None else replace(cfg.shield, budget=args.budget)
    seeds = episode_seeds(args.seed, args.episodes, 5)
    reports = []
    for archetype, overrides in cfg.scenarios.items():
        if args.brake_decel is not None:
            overrides = {**overrides, "brake_decel": args.brake_decel}
        scenario = default_scenario(archetype, **overrides)
        if args.policies:
            policy = load_qtable(args.policies / f"{archetype}.qtab")
        else:
            policy = ScriptedAggressive(scenario.v_max)
        for regime in cfg.regimes:
            schedule = RegimeSchedule(regime)
            logs = run_batch(policy, True, scenario, schedule, shield, seeds)
            scope = f"{archetype}/{regime}"
            for check in (check_local_admissibility, check_feasibility, check_cumulative_envelope,
                          check_threshold_monotonicity):
                reports.append((scope, check(logs)))
            if args.episodes >= 50:
                reports.append((scope, check_value_gap_bound(policy, scenario, schedule, shield, seeds,
                                                             cfg.verify.gamma)))
    print(reports_text(reports), end="")
    failed = sum(not r.passed for _, r in reports)
    print(f"{len(reports) - failed}/{len(reports)} checks passed")


if __name__ == "__main__":
    main()
