"""Run the desk experiments in dependency order and export their reports.

    python scripts/run_experiments.py --out runs/desk
    python scripts/run_experiments.py --out runs/quick --config scripts/quick.ini ablate-tvq

Cells already trained under --out are reloaded, so an interrupted run resumes.
"""

import argparse
import logging
import time

from texvq.config import config_hash, load_config
from texvq.experiments import RUNNERS, run_and_export

ORDER = ["ablate-tvq", "ablate-rap", "probe-decomposition", "sweep-codebook", "sweep-structure"]


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("experiments", nargs="*", metavar="NAME", help=f"any of {ORDER} (default: all)")
    p.add_argument("--config")
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--override", action="append", default=[])
    args = p.parse_args()
    unknown = set(args.experiments) - set(RUNNERS)
    if unknown:
        p.error(f"unknown experiment(s): {sorted(unknown)}")
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config, args.override + [f"run.out_dir={args.out}", f"run.seed={args.seed}"])
    logging.info("config_hash %s", config_hash(cfg))
    for name in args.experiments or ORDER:
        t0 = time.perf_counter()
        report, paths = run_and_export(name, cfg)
        logging.info("%s done in %.0fs -> %s", name, time.perf_counter() - t0, paths["csv"])
        for k, v in report.summary.items():
            logging.info("  %s = %s", k, v)


if __name__ == "__main__":
    main()
