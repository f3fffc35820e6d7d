"""Command-line entry point ``score-assim``.

Exit codes: 0 on success, 2 on configuration errors, 3 when a filter step fails.
"""

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError
from .harness import (
    ExperimentConfig,
    compare,
    format_table,
    list_presets,
    load_preset,
    run_experiment,
    save_diagnostics,
    simulate,
    write_results,
)
from .models import write_trajectory_csv

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _config(args):
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        cfg = ExperimentConfig.from_json(args.config)
    elif args.preset:
        cfg = load_preset(args.preset)
    else:
        raise ConfigError("one of --config or --preset is required")
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "filter", None):
        changes["filter"] = args.filter
    return cfg.replace(**changes) if changes else cfg


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args):
    cfg = _config(args)
    path = _out_dir(args) / "trajectory.csv"
    write_trajectory_csv(simulate(cfg), path)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_run(args):
    cfg = _config(args)
    out = _out_dir(args)
    result = run_experiment(cfg)
    path = out / f"results_{result.filter}.{args.format}"
    write_results(result, path, args.format)
    if result.filter == "sf" and args.diagnostics:
        save_diagnostics(result, out / "diagnostics.jsonl")
    print(f"{result.filter}: aggregate RMSE {result.aggregate_rmse:.4f} ({result.wall_time:.1f} s); wrote {path}")
    for err in result.errors:
        print(f"error in repetition {err['rep']} at step {err['step']}: {err['error']}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_RUNTIME


def cmd_compare(args):
    cfg = _config(args)
    out = _out_dir(args)
    filters = args.filters.split(",") if args.filters else None
    results = compare(cfg, filters)
    for name, res in results.items():
        write_results(res, out / f"results_{name}.{args.format}", args.format)
    table = format_table(results)
    (out / "compare.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK if all(r.ok for r in results.values()) else EXIT_RUNTIME


def cmd_presets(args):
    for name in list_presets():
        print(f"{name:<24}{load_preset(name).description}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="score-assim", description="Score-based filtering twin experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="experiment JSON file")
        p.add_argument("--preset", help="name of a bundled preset (see `score-assim presets`)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", default=out_default, help="output directory")

    p = sub.add_parser("simulate", help="simulate a truth trajectory and its observations")
    common(p, "out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="run the configured filter")
    common(p, "out")
    p.add_argument("--filter", choices=["sf", "apf", "enkf", "kf", "none"], help="override the configured filter")
    p.add_argument("--format", choices=["csv", "jsonl"], default="csv")
    p.add_argument("--diagnostics", action="store_true", help="also write per-step SF diagnostics")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several filters on one shared truth")
    common(p, "out")
    p.add_argument("--filters", help="comma-separated filter ids (default: sf,apf,enkf and kf when exact)")
    p.add_argument("--format", choices=["csv", "jsonl"], default="csv")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("presets", help="list bundled presets")
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
