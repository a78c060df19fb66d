"""Spread of min_r M(B(x,r))/g(r) across M-sampled points under exact rescaling.

A quadratic snake cloud is rescaled (space by c, mass by c^4, which preserves
its law) so that the median path step takes each requested value; the
interquartile spread of the per-point minima is then reported for radii in
[1e-3, 0.99 * r0].
"""

import argparse
import math

import numpy as np

from snakelab import packing, trees
from snakelab.cli import seed_stream
from snakelab.mechanism import BranchingMechanism, GaugeFunction


def spreads(steps, n_target, seed, d=5, samples=200):
    mech = BranchingMechanism.quadratic()
    g = GaugeFunction(mech, "g")
    rng = seed_stream(seed, 0)
    exc = trees.sample_height_excursion(mech, n_target, rng)
    snake = trees.sample_snake(exc, np.zeros(d), d, rng)
    base = trees.occupation_and_range(snake).cloud
    natural = float(np.median(np.linalg.norm(np.diff(snake.path, axis=0), axis=1)))
    r_hi = 0.99 * g.r0
    radii = np.geomspace(1e-3, r_hi, int(math.ceil(40 * math.log10(r_hi / 1e-3))) + 1)
    for step in steps:
        c = step / natural
        cloud = packing.PointCloud(base.points * c, base.weights * c**4)
        idx = rng.choice(cloud.size, samples, p=cloud.weights / cloud.weights.sum())
        mins = np.array([packing.local_density(cloud, g, cloud.points[i], radii).min_ratio for i in idx])
        q1, q3 = np.percentile(mins, [25, 75])
        print(f"median step {step:.1e}: min {mins.min():.3g}  IQR {q1:.3g}..{q3:.3g}  spread {q3 / q1:.2f}", flush=True)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=float, nargs="+", default=[1e-3, 3e-3, 1e-2])
    ap.add_argument("--n-target", type=int, default=50_000)
    ap.add_argument("--seed", type=int, default=15)
    args = ap.parse_args()
    spreads(args.steps, args.n_target, args.seed)
