"""Command line entry point: ``synfed run | compare | acceptance``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace

from ..errors import ComparabilityError, ConfigError, SynFedError
from . import acceptance, compare, pipeline
from .config import load_config

log = logging.getLogger("synfed")


def _cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, args.override)
        if args.out:
            cfg = replace(cfg, experiment=replace(cfg.experiment, output_dir=args.out))
        cfg.validate()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        summary, _ = pipeline.run_experiment(cfg)
    except SynFedError as exc:
        print(f"error: run failed: {exc}", file=sys.stderr)
        return 1
    agg = summary["aggregate"]
    print(
        f"{cfg.experiment.output_dir}: {summary['n_seeds']} seed(s), "
        f"final accuracy {agg['final_accuracy']['mean']:.4f} ± {agg['final_accuracy']['std']:.4f}, "
        f"best {agg['best_accuracy']['mean']:.4f}"
    )
    return 0


def _cmd_compare(args) -> int:
    try:
        rows = compare.compare_runs(args.runs, args.metric, args.target)
    except (ConfigError, ComparabilityError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.json:
        print(json.dumps([asdict(r) for r in rows], indent=2))
    else:
        print(compare.format_table(rows))
    return 0


def _cmd_acceptance(args) -> int:
    results = acceptance.run_all(only=args.only or None)
    n_pass = sum(r.passed for r in results)
    print(f"{n_pass}/{len(results)} criteria passed")
    return 0 if n_pass == len(results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synfed", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config over all its seeds")
    p.add_argument("--config", required=True, help="TOML experiment config")
    p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable)")
    p.add_argument("--out", help="output directory (overrides experiment.output_dir)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("compare", help="rounds/parameters to reach a target metric")
    p.add_argument("--runs", nargs="+", required=True, metavar="DIR")
    p.add_argument("--metric", choices=compare.METRICS, default="accuracy")
    p.add_argument("--target", type=float, required=True)
    p.add_argument("--json", action="store_true", help="emit JSON instead of a table")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("acceptance", help="run the acceptance criteria")
    p.add_argument("--only", nargs="*", metavar="ID", help="restrict to these criterion ids")
    p.set_defaults(func=_cmd_acceptance)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
