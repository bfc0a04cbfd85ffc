#!/usr/bin/env python3
"""Clean-vs-poisoned runs of every attack preset on the default benchmark.

Writes one output directory per attack with runs.csv / deltas.csv /
report.txt, mirroring the main results table layout.
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from poisonlab.config import parse_config
from poisonlab.runner import cmd_run

CONFIG = """
[stream]

[method]
name = {method}

[attack]
preset = {preset}
p = 1

[run]
seeds = {seeds}
"""


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="results/default-benchmark")
    parser.add_argument("--method", default="LWF",
                        choices=("FINETUNE", "LWF", "EWC", "REPLAY", "JOINT"))
    parser.add_argument("--seeds", default="0,1,2,3,4")
    parser.add_argument("--attacks", default="BASE,BAIT,MULTIBASE,MULTIBAIT")
    args = parser.parse_args()
    for preset in args.attacks.split(","):
        plan = parse_config(CONFIG.format(method=args.method, preset=preset,
                                          seeds=args.seeds))
        out = os.path.join(args.out, args.method.lower(), preset.lower())
        cmd_run(plan, out)
        print(f"{args.method} {preset}: wrote {out}")
        with open(os.path.join(out, "report.txt")) as fh:
            print(fh.read())


if __name__ == "__main__":
    main()
