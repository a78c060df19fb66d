"""Box-counting slope of quadratic super-Brownian ranges in d = 5 against sample size.

The limit slope is 4. The script shows how slowly the desk-scale estimate
climbs towards it: per-size median slope over several ranges, plus local
slopes between consecutive box sides.
"""

import argparse
import json

import numpy as np

from snakelab import packing, trees
from snakelab.cli import seed_stream
from snakelab.mechanism import BranchingMechanism


def study(sizes, ranges, seed, d=5):
    mech = BranchingMechanism.quadratic()
    rows = []
    for n_target in sizes:
        slopes, points, local = [], [], []
        for i in range(ranges):
            rng = seed_stream(seed, n_target * 1000 + i)
            exc = trees.sample_height_excursion(mech, n_target, rng)
            path = trees.sample_snake(exc, np.zeros(d), d, rng).path
            rep = packing.range_box_report(path)
            slopes.append(rep.regression.slope)
            points.append(path.shape[0])
            ls = -np.diff(np.log(rep.counts)) / np.diff(np.log(rep.eps))
            local.append(ls.tolist())
        rows.append({
            "n_target": n_target,
            "median_points": float(np.median(points)),
            "median_slope": float(np.median(slopes)),
            "slopes": slopes,
            "median_local_slopes": np.median(np.array(local), axis=0).tolist(),
        })
        print(f"n_target={n_target:>7} points~{np.median(points):>9.0f} median slope {np.median(slopes):.3f}", flush=True)
    return rows


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", type=int, nargs="+", default=[3000, 10000, 30000, 100000])
    ap.add_argument("--ranges", type=int, default=5)
    ap.add_argument("--seed", type=int, default=14)
    ap.add_argument("--json", help="write the rows here")
    args = ap.parse_args()
    rows = study(args.sizes, args.ranges, args.seed)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
