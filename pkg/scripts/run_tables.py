"""Run a set of experiment configs and print one combined summary table.

Usage: python3 scripts/run_tables.py configs/cva_d1_dbdp1.json configs/cva_d3_dbdp1.json --out results/tables
"""

import argparse
import logging
from pathlib import Path

from neuralpde.experiment import ExperimentConfig, aggregate, emit_outputs, format_table, run_experiment


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("configs", nargs="+", help="JSON experiment configs")
    parser.add_argument("--out", default="results/tables", help="directory for records.csv and summaries")
    parser.add_argument("--seeds", type=int, help="truncate every config to its first SEEDS seeds")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    records = []
    for path in args.configs:
        config = ExperimentConfig.load(path)
        if args.seeds:
            config.seeds = config.seeds[: args.seeds]
        config.out_dir = str(Path(args.out) / Path(path).stem)
        records += run_experiment(config)
    ok = [r for r in records if r.status == "ok"]
    summaries = aggregate(records) if ok else []
    emit_outputs(summaries, records, args.out)
    print(format_table(summaries))
    failed = len(records) - len(ok)
    if failed:
        print(f"{failed} run(s) diverged; see {args.out}/records.csv")


if __name__ == "__main__":
    main()
