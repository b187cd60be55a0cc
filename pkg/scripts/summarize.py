#!/usr/bin/env python3
"""Print median timings from CSVs written by the launcher.

overlap / io-overlap files: median t_t per (mode, t_w), with the linear
fit of t_t against t_w per mode.  pingpong files: one line per size.
Other files: median of every numeric
column per mode.
"""

import argparse
import csv
import statistics
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np


def summarize_overlap(rows):
    groups = defaultdict(list)
    for r in rows:
        groups[r["mode"], float(r["t_w"])].append(float(r["t_t"]))
    by_mode = defaultdict(list)
    for (mode, t_w), values in sorted(groups.items()):
        by_mode[mode].append((t_w, statistics.median(values)))
    for mode, points in by_mode.items():
        print(f"  {mode}")
        for t_w, t_t in points:
            print(f"    t_w={t_w:8.4f}  t_t={t_t:8.4f}")
        if len(points) > 1:
            slope, intercept = np.polyfit(*zip(*points), 1)
            print(f"    fit: t_t = {slope:.3f} * t_w + {intercept:.4f}")


def summarize_pingpong(rows):
    for r in rows:
        print(f"  {r['mode']:8s} V={int(r['V']):>10d}  t_oneway={float(r['t_oneway']):.4g} s  "
              f"bandwidth={float(r['bandwidth']):.4g} B/s")


def summarize_columns(rows):
    by_mode = defaultdict(list)
    for r in rows:
        by_mode[r.get("mode", "-")].append(r)
    for mode, sel in by_mode.items():
        cells = []
        for key in sel[0]:
            try:
                values = [float(r[key]) for r in sel]
            except ValueError:
                continue
            cells.append(f"{key}={statistics.median(values):.4g}")
        print(f"  {mode}: " + " ".join(cells))


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("files", nargs="+", type=Path)
    args = parser.parse_args()
    for path in args.files:
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        print(f"{path} ({len(rows)} rows)")
        if not rows:
            continue
        if {"t_w", "t_t"} <= set(rows[0]):
            summarize_overlap(rows)
        elif "t_oneway" in rows[0]:
            summarize_pingpong(rows)
        else:
            summarize_columns(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
