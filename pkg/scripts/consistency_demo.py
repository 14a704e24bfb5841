#!/usr/bin/env python3
"""Two charts on overlapping halves of a hemisphere cap, before and after phase 2.

Prints the consistency and data losses every 100 sweeps, and writes both
dense charts before and after so the seam can be inspected.

    python scripts/consistency_demo.py --out runs/consistency
"""

import argparse
import copy
from pathlib import Path

import numpy as np

from chartatlas import atlas as A
from chartatlas.geometry import normalize
from chartatlas.plyio import write_cloud
from chartatlas.scenarios import fit_two_charts, hemisphere_cap, overlapping_halves


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n-sphere", type=int, default=800, help="Fibonacci points on the full sphere")
    ap.add_argument("--z-min", type=float, default=0.5)
    ap.add_argument("--half-width", type=float, default=0.15)
    ap.add_argument("--phase1-iters", type=int, default=2000)
    ap.add_argument("--sweeps", type=int, default=1000)
    ap.add_argument("--w-fit", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/consistency"))
    args = ap.parse_args()

    config = A.AtlasConfig(layers=(2, 64, 128, 128, 3), phase1_iters=args.phase1_iters, sinkhorn_iters=100,
                           plateau_tol=-np.inf, seed=args.seed)
    cloud, transform = normalize(hemisphere_cap(args.n_sphere, args.z_min))
    X = cloud.points
    sets = overlapping_halves(X, args.half_width)
    print(f"{len(X)} points, halves of {len(sets[0])} and {len(sets[1])}, {len(np.intersect1d(*sets))} shared")

    patches = fit_two_charts(X, sets, config)
    overlaps = A.build_overlaps(patches)
    args.out.mkdir(parents=True, exist_ok=True)
    before = A.Atlas(copy.deepcopy(patches), overlaps, transform, config)
    write_cloud(A.resample(before, 32), args.out / "phase1.ply")

    overlaps, hist = A.fit_consistency(patches, overlaps, X, config, w_fit=args.w_fit, max_iters=args.sweeps)
    write_cloud(A.resample(A.Atlas(patches, overlaps, transform, config), 32), args.out / "phase2.ply")
    print("sweep  consistency  data")
    for k in sorted({*range(0, len(hist.consistency), 100), len(hist.consistency) - 1}):
        print(f"{k:5d}  {hist.consistency[k]:11.4g}  {', '.join(f'{d:.4g}' for d in hist.data[k])}")
    print(f"ratio {hist.consistency[-1] / hist.consistency[0]:.3f}, refreshes {hist.refreshes}, "
          f"sound {A.check_correspondences(patches, overlaps)}")


if __name__ == "__main__":
    main()
