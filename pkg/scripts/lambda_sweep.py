#!/usr/bin/env python3
"""Effect of the Sinkhorn parameter on a single-patch fit.

Writes a sine-sheet cloud, then runs ``chartatlas lambda-sweep`` over the
given lambdas (eps = 1/lambda) and prints the resulting table.

    python scripts/lambda_sweep.py --lambdas 1,10,100,1000 --out runs/sweep
"""

import argparse
import sys
from pathlib import Path

from chartatlas import cli
from chartatlas.plyio import write_cloud
from chartatlas.scenarios import sine_sheet


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--lambdas", default="1,10,100,1000")
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--layers", default="2,64,128,128,3")
    ap.add_argument("--out", type=Path, default=Path("runs/sweep"))
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    cloud_path = args.out / "sine_sheet.ply"
    write_cloud(sine_sheet(args.n), cloud_path)
    code = cli.main([
        "lambda-sweep", "--input", str(cloud_path), "--out", str(args.out), "--lambdas", args.lambdas,
        "--layers", args.layers, "--phase1-iters", str(args.iters), "--threads", "1",
    ])
    if code == 0:
        print((args.out / "sweep.csv").read_text(), end="")
    return code


if __name__ == "__main__":
    sys.exit(main())
