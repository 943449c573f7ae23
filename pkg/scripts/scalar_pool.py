"""Bias and pool shortfall of the d=1 streaming estimator.

Runs the scalar state with and without refilling a short tail pool, and with
a generous pool for reference.

    python scripts/scalar_pool.py --runs 2000
"""

import argparse
import math

import numpy as np

from kvbound.attention import softmax_weights
from kvbound.sampling import ScalarStreamState


class _Roomy(ScalarStreamState):
    SPACE_CONSTANT = 100


def _run(cls, keys, values, q, runs, queries, **kw):
    est, short = [], 0
    for r in range(runs):
        rng = np.random.default_rng(r)
        state = cls(**kw)
        for k, v in zip(keys, values):
            state.update(float(k), float(v), rng)
        for _ in range(queries):
            est.append(state.query(q, rng)[0])
        short += state.short_queries
    est = np.array(est)
    return est.mean(), est.std(ddof=1) / math.sqrt(est.size), short / est.size


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=256)
    ap.add_argument("--q", type=float, default=3.0)
    ap.add_argument("--runs", type=int, default=2000)
    ap.add_argument("--queries", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    keys, values = rng.uniform(-1, 1, args.n), rng.uniform(0, 1, args.n)
    exact = float(softmax_weights(args.q * keys) @ values)
    print(f"exact {exact:.6f}")
    for label, cls, kw in [
        ("budget, refill", ScalarStreamState, {}),
        ("budget, no refill", ScalarStreamState, {"refill": False}),
        ("roomy pool", _Roomy, {"pool_rate": 10.0}),
    ]:
        mean, se, short = _run(cls, keys, values, args.q, args.runs, args.queries, **kw)
        print(f"{label:18s} mean {mean:.6f}  bias {mean - exact:+.6f} ({(mean - exact) / se:+.2f} SE)  short {short:.3f}")


if __name__ == "__main__":
    main()
