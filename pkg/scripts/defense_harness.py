#!/usr/bin/env python3
"""Detection metrics on the many-task harness for BASE and BAIT poisons."""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from poisonlab.config import parse_config
from poisonlab.runner import cmd_defense_eval, emit_plotdata

CONFIG = """
[stream]

[method]
name = {method}

[defense]
statistic = {statistic}
calibration_task = 1

[harness]
total_tasks = {total}
attack = {attack}

[run]
seeds = {seed}
"""


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="results/defense")
    # distillation hides the activation-shift signal at this scale; guard
    # finetuned streams unless explicitly overridden
    parser.add_argument("--method", default="FINETUNE")
    parser.add_argument("--statistic", default="MAX")
    parser.add_argument("--total-tasks", type=int, default=25)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    for attack in ("BASE", "BAIT"):
        plan = parse_config(CONFIG.format(method=args.method, statistic=args.statistic,
                                          total=args.total_tasks, attack=attack,
                                          seed=args.seed))
        out = os.path.join(args.out, attack.lower())
        result = cmd_defense_eval(plan, out)
        emit_plotdata(out)
        alphas = {k: round(v, 2) for k, v in result["alphas"].items()}
        print(f"{attack}: alphas={alphas}")
        for stat, m in result["metrics"].items():
            print(f"  {stat:8s} acc={m['acc']:.3f} clean={m['clean_acc']:.3f} "
                  f"attack={m['attack_acc']:.3f} f1={m['f1']:.3f}")


if __name__ == "__main__":
    main()
