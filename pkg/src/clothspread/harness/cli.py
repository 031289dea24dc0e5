"""Command-line entry point: ``run``, ``validate`` and ``compare``."""
from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

from .config import ConfigError, load_scenario
from .recipes import RecipeError
from .run import EXIT_CODES, CompareError, compare_runs, format_report, run_scenario

EXIT_CONFIG = 4
BUNDLED = ("condition1", "condition2", "full_task", "forced_miss")


def bundled_scenario_path(name: str) -> Path:
    return Path(str(resources.files("clothspread.scenarios").joinpath(f"{name}.yaml")))


def resolve_scenario(arg: str) -> Path:
    """A path, or the name of a bundled scenario."""
    p = Path(arg)
    if not p.exists() and arg in BUNDLED:
        return bundled_scenario_path(arg)
    return p


def _cmd_run(args) -> int:
    try:
        cfg = load_scenario(resolve_scenario(args.scenario))
        result = run_scenario(cfg, seed=args.seed, max_time=args.max_time, out_dir=args.out)
    except (ConfigError, RecipeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    m = result.metrics
    print(f"{m['scenario']} seed={m['seed']}: {m['outcome']} after {m['sim_time']:.3f} s sim time")
    if m["initial_error"] is not None:
        print(f"  task error {m['initial_error']:.4f} m -> {m['final_error']:.4f} m")
    if m["diverged_at"]:
        print(f"  {m['diverged_at']}")
    print(f"  standing positions {m['n_standing_positions']}, grasp checks {m['grasp_checks']}, "
          f"base path {m['base_path_length']:.3f} m")
    print(f"  logs written to {args.out}")
    return EXIT_CODES[m["outcome"]]


def _cmd_validate(args) -> int:
    try:
        cfg = load_scenario(resolve_scenario(args.scenario))
    except ConfigError as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    k = len(cfg.features)
    print(f"{cfg.name}: valid (k={k}, d=2, m={2 * k}, seed={cfg.seed})")
    return 0


def _cmd_compare(args) -> int:
    metrics = []
    for d in args.runs:
        path = Path(d) / "metrics.json"
        try:
            metrics.append(json.loads(path.read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read {path}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    try:
        report = compare_runs(metrics)
    except CompareError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = format_report(report)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clothspread", description="Cloth-spreading simulation harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario and write logs")
    p.add_argument("--scenario", required=True, help="scenario file or bundled name (" + ", ".join(BUNDLED) + ")")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory for logs")
    p.add_argument("--max-time", type=float, default=None, help="simulated-time budget in seconds")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("validate", help="check a scenario file")
    p.add_argument("--scenario", required=True)
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("compare", help="summarize several runs of one scenario")
    p.add_argument("--out", required=True, help="directory for the report")
    p.add_argument("runs", nargs="+", help="run directories containing metrics.json")
    p.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
