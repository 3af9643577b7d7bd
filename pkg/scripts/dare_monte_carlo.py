"""Check empirically that DARE rescaling keeps the expected task vector.

Averages many seeded DARE-TIES merges of one model against its plain TIES merge
(density 1) and reports the largest gap in units of the standard error.
"""

import argparse
import math

import numpy as np

from posttrain import merge
from posttrain.tensorstore import Checkpoint


def main():
    ap = argparse.ArgumentParser(description="DARE unbiasedness experiment")
    ap.add_argument("--draws", type=int, default=10_000)
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--p", type=float, nargs="+", default=[0.1, 0.5, 0.9])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    base = Checkpoint.from_arrays({"w": rng.normal(size=args.size)})
    model = Checkpoint.from_arrays({"w": base["w"].to_float32() + rng.normal(size=args.size)})
    target = merge.ties_merge(base, [model], 1.0, 1.0)["w"].to_float32().astype(float)

    print(f"{'p':>5} {'max |gap|':>12} {'max z':>8}")
    for p in args.p:
        draws = np.stack([merge.dare_ties_merge(base, [model], p, 1.0, 1.0, s)["w"].to_float32().astype(float)
                          for s in range(args.draws)])
        gap = np.abs(draws.mean(axis=0) - target)
        se = draws.std(axis=0, ddof=1) / math.sqrt(args.draws)
        z = gap / np.where(se > 0, se, 1)
        print(f"{p:5.2f} {gap.max():12.3e} {z.max():8.2f}")


if __name__ == "__main__":
    main()
