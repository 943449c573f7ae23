"""Decode success against embedding dimension for the index reduction.

Shrinks ``d`` below the JL dimension and records, per seed, whether the JL
event held and how many planted bits were recovered.

    python scripts/decode_sweep.py --n 16 --eps 0.1 --seeds 20 --out sweep.csv
"""

import argparse
import csv
import sys

from kvbound.instances import build_index_instance, decode, random_bits
from kvbound.jl import dim_for


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=16)
    ap.add_argument("--eps", type=float, default=0.1)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--fractions", type=float, nargs="+", default=[0.002, 0.01, 0.05, 0.1, 0.25, 0.5, 1.0])
    ap.add_argument("--out", default="-")
    args = ap.parse_args(argv)

    full = dim_for(args.n, args.eps)
    fh = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["d", "seed", "jl_passed", "max_cross_error", "bit_failures", "bits"])
    for frac in args.fractions:
        d = max(2, round(frac * full))
        for seed in range(args.seeds):
            inst = build_index_instance(random_bits(args.n, d, seed), args.eps, seed=seed)
            rep = decode(inst)
            w.writerow([d, seed, int(rep.jl.passed), f"{rep.jl.max_cross_error:.4f}", rep.failures, args.n * d])
    if fh is not sys.stdout:
        fh.close()


if __name__ == "__main__":
    main()
