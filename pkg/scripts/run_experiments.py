#!/usr/bin/env python3
"""Run the benchmark suite through the launcher and keep one CSV per experiment.

Settings match the acceptance runs: paced links on loopback so transfer
times are long enough to measure on a single machine.

    python3 scripts/run_experiments.py --out results/ overlap ghostcell
"""

import argparse
import logging
import subprocess
import sys
import time
from pathlib import Path

MiB = 1024 * 1024

EXPERIMENTS = {
    "pingpong": ["--ranks", "2", "--link-bandwidth", "100e6", "pingpong"],
    "overlap": ["--ranks", "2", "--link-bandwidth", "100e6", "overlap", "--size", str(10 * MiB)],
    "ghostcell-2": ["--ranks", "2", "--link-bandwidth", "5e6", "--reps", "5", "ghostcell",
                    "--halo", str(MiB), "--base-work", "2.0"],
    "ghostcell-4": ["--ranks", "4", "--link-bandwidth", "5e6", "--reps", "5", "ghostcell",
                    "--halo", str(MiB), "--base-work", "2.0"],
    "ghostcell-8": ["--ranks", "8", "--link-bandwidth", "5e6", "--reps", "5", "ghostcell",
                    "--halo", str(MiB), "--base-work", "2.0"],
    "spmvm": ["--ranks", "2", "--reps", "10", "--seed", "1", "spmvm", "--rows", "200000",
              "--half-bandwidth", "60000", "--threads", "2", "--comm-ratio", "1.0"],
    "io-overlap": ["--ranks", "2", "--reps", "3", "io-overlap", "--volume", str(64 * MiB),
                   "--throttle", str(64 * MiB)],
}

log = logging.getLogger("run_experiments")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("names", nargs="*", help=f"subset of: {', '.join(EXPERIMENTS)} "
                        "(a prefix such as 'ghostcell' selects all rank counts)")
    parser.add_argument("--out", type=Path, default=Path("results"))
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    names = [n for n in EXPERIMENTS if not args.names or any(n.startswith(p) for p in args.names)]
    if not names:
        parser.error("no experiment matches")
    args.out.mkdir(parents=True, exist_ok=True)
    failed = 0
    for name in names:
        target = args.out / f"{name}.csv"
        t0 = time.monotonic()
        code = subprocess.call([sys.executable, "-m", "asyncprogress", "--csv", str(target), *EXPERIMENTS[name]])
        log.info("%-12s exit %d in %.1f s -> %s", name, code, time.monotonic() - t0, target)
        failed += code != 0
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
