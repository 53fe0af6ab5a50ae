"""
Command-line entry point.

    python main.py simulate --preset default --seed 1 --out results/default
    python main.py simulate --config my_scenario.yaml --emit-trace --format json
    python main.py compare --seeds 1,2,3,4,5 --out results/compare --workers 4
"""
import argparse
import logging
import os
import sys
from typing import List, Optional

from config import Config
from helper import load_env

logger = logging.getLogger("main")


def _parse_seeds(text: str) -> List[int]:
    """'1,2,5' or '1-5' (inclusive) or a mix: '1-3,7'."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            low, high = part.split("-", 1)
            seeds.extend(range(int(low), int(high) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError(f"no seeds in {text!r}")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smartmme-sim", description="Two-tier cellular network energy simulator")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ... (default: SIM_LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one scenario and write its report")
    sim.add_argument("--preset", choices=Config.PRESET_NAMES, default=None)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--duration", type=float, default=None, help="seconds; overrides the preset/config")
    sim.add_argument("--out", default=Config.OUTPUT_DIR)
    sim.add_argument("--config", default=None, help="scenario YAML file (preset schema)")
    sim.add_argument("--emit-trace", action="store_true", help="also write trace, decision and event logs")
    sim.add_argument("--format", choices=("csv", "json"), default="csv")
    sim.add_argument("--archive", action="store_true", help="store the totals in DATABASE_URL")

    cmp_ = sub.add_parser("compare", help="run all four presets over several seeds")
    cmp_.add_argument("--seeds", type=_parse_seeds, default=[1, 2, 3, 4, 5])
    cmp_.add_argument("--out", default=Config.OUTPUT_DIR)
    cmp_.add_argument("--workers", type=int, default=Config.WORKERS)
    cmp_.add_argument("--archive", action="store_true", help="store every run's totals in DATABASE_URL")
    return parser


def _archive(reports) -> None:
    from models import init_db, record_run

    init_db()
    for report in reports:
        run_id = record_run(report)
        logger.info("Archived %s seed=%s as run %s", report.name, report.seed, run_id)


def cmd_simulate(args) -> int:
    from report import emit_report
    from scenario_loader import load_config_file, preset
    from scenario_runner import run

    if args.config:
        config = load_config_file(args.config, seed=args.seed, duration_s=args.duration)
        if args.preset:
            logger.warning("--preset %s ignored: --config given", args.preset)
    else:
        seed = args.seed if args.seed is not None else Config.DEFAULT_SEED
        config = preset(args.preset or "default", seed, duration_s=args.duration)
    report = run(config, record_log=args.emit_trace)
    for path in emit_report(report, fmt=args.format, out_dir=args.out, emit_trace=args.emit_trace):
        print(path)
    if args.archive:
        _archive([report])
    return 0


def cmd_compare(args) -> int:
    from report import emit_comparison, emit_totals
    from scenario_runner import COMPARISON_COLUMNS, compare_scenarios

    comparison = compare_scenarios(args.seeds, workers=args.workers)
    reports = [comparison.reports[seed][name] for seed in args.seeds for name in Config.PRESET_NAMES]
    paths = emit_comparison(comparison.rows, COMPARISON_COLUMNS, args.out, comparison.spearman_summary())
    paths.append(emit_totals(reports, args.out))
    for path in paths:
        print(path)
    for row in comparison.rows:
        verdict = "ok" if row["ordering_holds"] == "true" else f"VIOLATED {row['violations']}"
        print(f"seed {row['seed']}: data_aware={row['data_aware_j']} ue_aware={row['ue_aware_j']} "
              f"default={row['default_j']} random={row['random_j']} -> {verdict}")
    summary = comparison.spearman_summary()
    print(f"spearman(avg_connected_ues, energy) over {summary['n']} BSs: {summary['rho']}")
    if args.archive:
        _archive(reports)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    load_env()
    parser = build_parser()
    args = parser.parse_args(argv)
    level = args.log_level or os.environ.get("SIM_LOG_LEVEL") or Config.LOG_LEVEL
    logging.basicConfig(level=level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        return cmd_compare(args)
    except Exception:
        logger.exception("%s failed", args.command)
        return 1


if __name__ == '__main__':
    sys.exit(main())
