#!/usr/bin/env python3
"""Learned decoder vs count-min on a 10**6-item Zipf stream, plus the no-equivariance ablation.

    python scripts/accuracy.py --out results/accuracy [--epochs 150] [--seed 7]
"""

import argparse
import time

from uclsketch.core import TrainConfig
from uclsketch.experiment import ExperimentPlan, run_plan
from uclsketch.streamgen import ZipfSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/accuracy")
    ap.add_argument("--epochs", type=int, default=150)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--skew", type=float, default=1.3)
    ap.add_argument("--length", type=int, default=10**6)
    ap.add_argument("--preset", default="16KB")
    args = ap.parse_args()

    plan = ExperimentPlan(ZipfSpec(args.skew, 10**6, args.length, seed=1), presets=(args.preset,),
                          algorithms=("ucl", "cm"), variants=("full", "no-eq"), seeds=(args.seed,),
                          train=TrainConfig(epochs=args.epochs), out=args.out)
    t0 = time.perf_counter()
    res = run_plan(plan, log=lambda ep, parts: ep % 25 == 0 and print(f"  epoch {ep}: loss {parts.total:.5f}"))
    print(res.csv_text(), end="")
    for algo in ("ucl", "ucl-no-eq"):
        print(f"{algo}: ARE/CM {res.value(algo, 'are') / res.value('cm', 'are'):.3f}, "
              f"WMRD/CM {res.value(algo, 'wmrd') / res.value('cm', 'wmrd'):.3f}")
    print(f"done in {time.perf_counter() - t0:.0f}s; outputs in {args.out}")


if __name__ == "__main__":
    main()
