"""Shielded collision, intervention and cost rates as the budget B varies.

Writes one CSV row per (archetype, regime, budget) to stdout.
"""

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from cpss.config import load
from cpss.harness import batch_metrics, run_batch
from cpss.policy import episode_seeds, load_qtable
from cpss.traffic import RegimeSchedule


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/default.json")
    ap.add_argument("--policies", type=Path, default=Path("runs/default/policies"))
    ap.add_argument("--budgets", default="0.25,0.5,1,2,4,8")
    ap.add_argument("--episodes", type=int, default=200)
    ap.add_argument("--regimes", default="stationary,high")
    args = ap.parse_args()

    cfg = load(args.config)
    budgets = [float(b) for b in args.budgets.split(",")]
    seeds = episode_seeds(0, args.episodes, 6)
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["scenario", "regime", "budget", "collision_rate", "intervention_rate", "mean_cum_cost",
                  "proximity_risk_raw"])
    for archetype in cfg.scenarios:
        policy = load_qtable(args.policies / f"{archetype}.qtab")
        scenario = cfg.scenario(archetype)
        for regime in args.regimes.split(","):
            for budget in budgets:
                logs = run_batch(policy, True, scenario, RegimeSchedule(regime), replace(cfg.shield, budget=budget),
                                 seeds)
                m = batch_metrics(logs, scenario.safety_margin)
                out.writerow([archetype, regime, budget, m["collision_rate"], f"{m['intervention_rate']:.5f}",
                              f"{m['mean_cum_cost']:.5f}", f"{m['proximity_risk_raw']:.5f}"])


if __name__ == "__main__":
    main()
