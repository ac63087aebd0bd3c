#!/usr/bin/env python3
"""Data-plane update rate per preset and skew, with snapshots on.

    python scripts/throughput.py [--length 1000000]
"""

import argparse
import time

from uclsketch.core import PRESETS, preset
from uclsketch.dataplane import DataPlane
from uclsketch.metrics import throughput
from uclsketch.streamgen import ZipfSpec, generate_arrays


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--length", type=int, default=10**6)
    ap.add_argument("--skews", default="0.8,1.1,1.3,1.5")
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    DataPlane(preset("16KB"), 0).ingest(*generate_arrays(ZipfSpec(1.0, 1000, 2000)))
    print(f"{'preset':7s} {'skew':>5s} {'Mops':>6s} {'reports':>8s} {'max hashes':>10s}")
    for skew in (float(s) for s in args.skews.split(",")):
        keys, vals = generate_arrays(ZipfSpec(skew, 10**6, args.length, seed=1))
        for name in sorted(PRESETS, key=lambda p: int(p[:-2])):
            best, dp, reps = 0.0, None, []
            for _ in range(args.repeats):
                dp = DataPlane(preset(name), 7)
                t0 = time.perf_counter()
                reps = dp.ingest(keys, vals)
                best = max(best, throughput(len(keys), time.perf_counter() - t0))
            print(f"{name:7s} {skew:5.2f} {best:6.2f} {len(reps):8d} {dp.max_hash_calls:10d}")


if __name__ == "__main__":
    main()
