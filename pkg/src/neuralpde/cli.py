"""Command-line entry point: run experiments from JSON configs and report their records."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .experiment import (
    ExperimentConfig,
    aggregate,
    emit_outputs,
    format_table,
    read_records,
    run_experiment,
    scheme_ids,
)
from .problems import CONTROL_CATALOG, problem_ids
from .sim import ConfigurationError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neuralpde", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-seed progress")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run every seed of a config and write records and summaries")
    run.add_argument("--config", required=True, help="path to a JSON experiment config")
    run.add_argument("--seed-offset", type=int, default=0, help="add this offset to every seed in the config")
    run.add_argument("--out", help="output directory (overrides out_dir in the config)")
    report = sub.add_parser("report", help="aggregate an existing records.csv")
    report.add_argument("--records", required=True, help="path to records.csv")
    sub.add_parser("list-problems", help="list problem ids")
    sub.add_parser("list-schemes", help="list scheme ids")
    return parser


def _cmd_run(args) -> int:
    config = ExperimentConfig.load(args.config)
    if args.seed_offset:
        config = dataclasses.replace(config, seeds=[s + args.seed_offset for s in config.seeds])
    if args.out:
        config = dataclasses.replace(config, out_dir=args.out)
    out_dir = config.out_dir or "results"
    config = dataclasses.replace(config, out_dir=out_dir)
    records = run_experiment(config)
    ok = [r for r in records if r.status == "ok"]
    summaries = aggregate(records) if ok else []
    paths = emit_outputs(summaries, records, out_dir)
    if summaries:
        print(format_table(summaries))
    for r in records:
        if r.status != "ok":
            print(f"seed {r.seed}: {r.status} ({r.message})", file=sys.stderr)
    print(f"wrote {paths['records']}, {paths['summary']}, {paths['summary_json']}")
    return EXIT_OK if len(ok) == len(records) else EXIT_DIVERGED


def _cmd_report(args) -> int:
    try:
        records = read_records(args.records)
    except OSError as exc:
        raise ConfigurationError(f"cannot read records {args.records}: {exc}") from exc
    print(format_table(aggregate(records)))
    return EXIT_OK if all(r.status == "ok" for r in records) else EXIT_DIVERGED


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "report":
            return _cmd_report(args)
        if args.command == "list-problems":
            for pid in problem_ids():
                print(f"{pid}\t{'control' if pid in CONTROL_CATALOG else 'pde'}")
            return EXIT_OK
        for sid in scheme_ids():
            print(sid)
        return EXIT_OK
    except (ConfigurationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
