#!/usr/bin/env python3
"""Severity and poisoned-percentage sweeps for the BAIT attack."""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from poisonlab.config import parse_config
from poisonlab.runner import cmd_sweep, emit_plotdata

CONFIG = """
[stream]

[method]
name = LWF

[attack]
preset = BAIT
p = 1

[run]
seeds = {seeds}
"""


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="results/sweeps")
    parser.add_argument("--seeds", default="0,1,2,3,4")
    parser.add_argument("--axis", default="severity", choices=("severity", "pp", "pn", "lambda"))
    parser.add_argument("--values", default=None)
    args = parser.parse_args()
    plan = parse_config(CONFIG.format(seeds=args.seeds))
    defaults = {"severity": [1, 2, 3, 4, 5], "pp": [20, 40, 60, 80, 100],
                "pn": [1, 2, 3, 4, 5], "lambda": [1, 10]}
    values = ([float(v) for v in args.values.split(",")] if args.values
              else defaults[args.axis])
    out = os.path.join(args.out, args.axis)
    cmd_sweep(plan, args.axis, values, out)
    emit_plotdata(out)
    print(f"wrote {out}/sweep.csv")


if __name__ == "__main__":
    main()
