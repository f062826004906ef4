"""Command line entry point: ``cpss {train,evaluate,verify,report}``.

Exit codes: 0 success, 1 usage or config error, 2 verification failure,
3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

from . import charts, config as config_mod
from .harness import (
    CSV_COLUMNS, METHODS, CellJob, HarnessError, aggregate, collect_rows, csv_bytes, evaluate_grid, export,
    read_metrics, read_traces, summary_rows, write_file,
)
from .policy import PolicyError, episode_seeds, load_qtable, save_qtable, train
from .traffic import RegimeSchedule
from .verifier import (
    VerificationError, check_cumulative_envelope, check_feasibility, check_local_admissibility,
    check_threshold_monotonicity, check_value_gap_bound, reports_csv, reports_text, value_gap_from_traces,
)

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _csv_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cpss", description="Budget-projected safety shield experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_text in (
        ("train", "train one policy per scenario archetype"),
        ("evaluate", "run the scenario x regime x method grid"),
        ("verify", "audit traces against the shield guarantees"),
        ("report", "re-render tables and charts from existing CSVs"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for evaluation")
        p.add_argument("--seed-override", type=int, dest="seed_override",
                       help="base seed: training uses it, evaluation uses consecutive seeds from it")
        p.add_argument("--scenarios", type=_csv_list, help="comma-separated archetypes")
        p.add_argument("--regimes", type=_csv_list, help="comma-separated regimes")
        if name in ("evaluate", "verify"):
            p.add_argument("--policies", help="directory of trained policies (default OUT/policies)")
        if name == "verify":
            p.add_argument("--traces", help="trace directory (default OUT/traces)")
    return parser


def _resolve(args) -> tuple[config_mod.RunConfig, Path]:
    cfg = config_mod.load(args.config)
    changes = {}
    if args.scenarios:
        unknown = [s for s in args.scenarios if s not in cfg.scenarios]
        if unknown:
            raise config_mod.ConfigError(f"--scenarios: {unknown[0]!r} not in config ({', '.join(cfg.scenarios)})")
        changes["scenarios"] = {s: cfg.scenarios[s] for s in args.scenarios}
    if args.regimes:
        raw = cfg.to_dict()
        raw["regimes"] = args.regimes
        changes["regimes"] = config_mod.from_dict(raw).regimes
    if args.seed_override is not None:
        changes["seeds"] = tuple(args.seed_override + i for i in range(len(cfg.seeds)))
        changes["policy"] = dataclasses.replace(cfg.policy, train_seed=args.seed_override)
    if args.jobs < 1:
        raise config_mod.ConfigError("--jobs must be >= 1")
    cfg = dataclasses.replace(cfg, **changes)
    out = Path(args.out) if args.out else Path(cfg.output_dir)
    return cfg, out


def cmd_train(cfg, out: Path) -> int:
    p = cfg.policy
    for archetype in cfg.scenarios:
        start = time.perf_counter()
        q = train(cfg.scenario(archetype), RegimeSchedule("stationary"), p.episodes, p.train_seed,
                  max_steps=p.max_steps, parallel=p.parallel, learning_rate=p.learning_rate,
                  discount=p.discount, exploration=p.exploration, exploration_final=p.exploration_final)
        path = out / "policies" / f"{archetype}.qtab"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_qtable(q, path)
        visited = int((q.visits.sum(axis=1) > 0).sum())
        print(f"{archetype:<13} steps={int(q.visits.sum()):>6} states_visited={visited:>4}/{q.values.shape[0]} "
              f"time={time.perf_counter() - start:.1f}s -> {path}")
    return EXIT_OK


def _print_table(summary) -> None:
    print(f"{'scenario':<13}{'regime':<12}{'method':<12}{'collision':>10}{'prox_norm':>11}"
          f"{'min_dist':>10}{'interv':>9}{'infeas':>8}")
    for row in summary_rows(summary):
        scenario, regime, method, _, _, coll, _, prox, mind, interv, infeas, _ = row
        print(f"{scenario:<13}{regime:<12}{method:<12}{coll:>10.4f}{prox:>11.3f}{mind:>10.2f}"
              f"{interv:>9.4f}{infeas:>8.1f}")
    for method in METHODS:
        if method in summary.grand:
            print(f"grand mean collision rate ({method}): {summary.grand_mean(method):.4f}")
    if all(m in summary.grand for m in METHODS):
        print(f"relative reduction: {100 * summary.relative_reduction():.1f}%")
    for flag in summary.flags:
        print(f"note: {flag}")


def cmd_evaluate(cfg, out: Path, jobs: int, policy_dir: Path | None) -> int:
    policy_dir = policy_dir or out / "policies"
    policies = {}
    for archetype in cfg.scenarios:
        path = policy_dir / f"{archetype}.qtab"
        if not path.is_file():
            raise FileNotFoundError(f"missing policy file {path} (run 'cpss train' first)")
        policies[archetype] = load_qtable(path)
    job_list = [
        CellJob(policies[a], cfg.scenario(a), RegimeSchedule(r), cfg.shield, tuple(cfg.seeds),
                cfg.episodes, cfg.trace_episodes)
        for a in cfg.scenarios for r in cfg.regimes
    ]
    results = evaluate_grid(job_list, workers=jobs)
    rows, flags = collect_rows(results)
    summary = aggregate(rows)
    summary.flags.extend(flags)
    traces = [log for res in results for method in METHODS for log in res.traces.get(method, [])]
    export(summary, rows, traces, out)
    write_file(out / "run_config.json", cfg.dumps().encode("utf-8"))
    _print_table(summary)
    return EXIT_OK


def _coupled_value_gap(cfg, policy_dir: Path) -> list:
    """Fresh coupled rollouts per cell, for every archetype with a trained policy."""
    v = cfg.verify
    seeds = episode_seeds(v.seed, v.pairs, 3)
    reports = []
    for archetype in cfg.scenarios:
        path = policy_dir / f"{archetype}.qtab"
        if not path.is_file():
            print(f"note: no policy at {path}; coupled value-gap rollouts skipped for {archetype}")
            continue
        policy = load_qtable(path)
        for regime in cfg.regimes:
            report = check_value_gap_bound(policy, cfg.scenario(archetype), RegimeSchedule(regime), cfg.shield,
                                           seeds, v.gamma)
            reports.append((f"{archetype}/{regime}/coupled", report))
    return reports


def cmd_verify(cfg, trace_dir: Path, out: Path, policy_dir: Path | None = None) -> int:
    logs = read_traces(trace_dir)
    shielded = [log for log in logs if log.method == "shielded"]
    if not shielded:
        raise HarnessError(f"no shielded traces in {trace_dir}")
    reports = []
    by_cell: dict[tuple, list] = {}
    for log in shielded:
        by_cell.setdefault((log.scenario, log.regime), []).append(log)
    for (scenario, regime), cell in sorted(by_cell.items()):
        scope = f"{scenario}/{regime}"
        for check in (check_local_admissibility, check_feasibility, check_cumulative_envelope,
                      check_threshold_monotonicity):
            reports.append((scope, check(cell)))
    reports.extend(value_gap_from_traces(logs, cfg.verify.gamma))
    reports.extend(_coupled_value_gap(cfg, policy_dir or out / "policies"))
    write_file(out / "verify_report.csv", reports_csv(reports))
    text = reports_text(reports)
    write_file(out / "verify_report.txt", text.encode("utf-8"))
    sys.stdout.write(text)
    failed = sum(not r.passed for _, r in reports)
    print(f"{len(reports) - failed}/{len(reports)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_VERIFY


def cmd_report(out: Path) -> int:
    rows = read_metrics(out / "metrics_by_seed.csv")
    summary = aggregate(rows)
    write_file(out / "metrics.csv", csv_bytes(CSV_COLUMNS, summary_rows(summary, 0)))
    write_file(out / "metrics_std.csv", csv_bytes(CSV_COLUMNS, summary_rows(summary, 1)))
    for name, svg in charts.render_all(summary).items():
        write_file(out / name, svg.encode("utf-8"))
    _print_table(summary)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg, out = _resolve(args)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, out, args.jobs, Path(args.policies) if args.policies else None)
        if args.command == "verify":
            return cmd_verify(cfg, Path(args.traces) if args.traces else out / "traces", out,
                              Path(args.policies) if args.policies else None)
        return cmd_report(out)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationError as exc:
        print(f"verification error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (OSError, HarnessError, PolicyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
