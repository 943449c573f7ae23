"""Relative error of the boosted window estimator over seeded trials.

Compares a single window-estimator draw, a plain mean of ``T * Q`` draws and
the median-of-means estimate on benign random streams.

    python scripts/boost_trials.py --trials 20 --eps 0.1 --delta 0.05
"""

import argparse

import numpy as np

from kvbound.attention import SlidingWindowSpec, window_attention_arrays
from kvbound.instances import build_random_instance
from kvbound.window import WindowEnsemble, boost_config, median_of_means


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=512)
    ap.add_argument("--w", type=int, default=32)
    ap.add_argument("--d", type=int, default=4)
    ap.add_argument("--eps", type=float, default=0.1)
    ap.add_argument("--delta", type=float, default=0.05)
    ap.add_argument("--v-max", type=float, default=2.0)
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    cfg = boost_config(args.eps, args.delta, args.v_max)
    print(f"T={cfg.T} Q={cfg.Q} replicas={cfg.replicas}")
    print("trial  single   mean     median-of-means")
    mom_ok = 0
    for t in range(args.trials):
        inst = build_random_instance(args.n, args.d, args.seed + t)
        ens = WindowEnsemble(SlidingWindowSpec(args.w), args.d, cfg.replicas, np.random.default_rng([t, 1]))
        for tok in inst.stream:
            ens.process(tok)
        draws = ens.sample(inst.queries[-1], np.random.default_rng([t, 2]))
        exact = window_attention_arrays(inst.keys, inst.values, inst.queries[-1], args.w)
        rel = lambda est: float(np.max(np.abs(est - exact) / np.abs(exact)))  # noqa: E731
        mom = rel(median_of_means(draws, cfg.T, cfg.Q))
        mom_ok += mom <= args.eps
        print(f"{t:5d}  {rel(draws[0]):.4f}   {rel(draws.mean(axis=0)):.4f}   {mom:.4f}")
    print(f"median-of-means within eps on {mom_ok}/{args.trials} trials")


if __name__ == "__main__":
    main()
