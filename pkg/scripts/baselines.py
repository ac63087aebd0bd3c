#!/usr/bin/env python3
"""Non-learned decoders (CM, CS, LSQR, OMP) across memory presets, no training involved.

    python scripts/baselines.py --presets 16KB,32KB,64KB --length 200000
"""

import argparse

from uclsketch.experiment import ExperimentPlan, run_plan
from uclsketch.streamgen import ZipfSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--presets", default="16KB,32KB,64KB")
    ap.add_argument("--algos", default="cm,cs,lsqr,omp")
    ap.add_argument("--skew", type=float, default=1.3)
    ap.add_argument("--length", type=int, default=200_000)
    ap.add_argument("--seeds", default="7")
    ap.add_argument("--out")
    args = ap.parse_args()

    plan = ExperimentPlan(ZipfSpec(args.skew, 10**6, args.length, seed=1),
                          presets=tuple(args.presets.split(",")), algorithms=tuple(args.algos.split(",")),
                          seeds=tuple(int(s) for s in args.seeds.split(",")), out=args.out)
    res = run_plan(plan)
    print(f"{'algo':6s} {'memory':6s} {'aae':>10s} {'are':>10s} {'wmrd':>8s} {'entropy':>10s}")
    for mem in plan.presets:
        for algo in plan.algorithms:
            vals = [res.value(algo, m, mem) for m in ("aae", "are", "wmrd", "entropy")]
            print(f"{algo:6s} {mem:6s} " + " ".join(f"{v:10.4g}" for v in vals))


if __name__ == "__main__":
    main()
