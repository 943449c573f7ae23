"""Command-line front end: ``python -m kvbound <command> ...``.

Exit codes: 0 success, 1 usage error, 2 invariant violation during a run,
3 threshold failure in ``--check`` mode (and, for ``decode``, a decode
failure that is explained by the JL event failing).
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import DomainError, KvCache, SlidingWindowSpec, exact_attention, window_attention_arrays
from .covering import covering_bound, greedy_cluster, unit_ball_points
from .instances import (
    build_index_instance, build_random_instance, build_time_family, build_time_sigma, build_window_instance,
    decode, multiplicative_perturbation, random_bits, read_instance, write_instance,
)
from .jl import dim_for
from .sampling import ScalarStreamState
from .window import WindowEnsemble, WindowState, boost_config, boosted_estimate, window_process, window_sample

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT, EXIT_CHECK = 0, 1, 2, 3

RUN_COLUMNS = ["instance_id", "estimator", "step", "coord", "exact", "estimate", "rel_error",
               "stored_vectors", "stored_bytes", "wall_ms", "seed"]
DECODE_COLUMNS = ["instance_id", "row", "coord", "output", "cut", "bit", "decoded", "correct", "jl_passed", "seed"]
CLUSTER_COLUMNS = ["points", "d", "radius", "count", "covering_bound", "target", "within_target",
                   "within_slack", "max_center_distance", "seed"]
ESTIMATORS = ("exact", "window", "window-boosted", "scalar-gumbel")
GEN_KINDS = {"index": "index-reduction", "window": "window-reduction", "family": "time-family",
             "sigma": "time-sigma", "random": "random"}


class UsageError(Exception):
    pass


class InvariantViolation(Exception):
    pass


# ---------------------------------------------------------------------------
# csv helpers

def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    return str(x)


class CsvSink:
    """Single writer; appends to ``path`` (header only when the file is new) or writes to stdout."""

    def __init__(self, path, columns):
        self.columns = columns
        if path in (None, "-"):
            self.handle, self.close_after = sys.stdout, False
            fresh = True
        else:
            p = Path(path)
            fresh = not p.exists() or p.stat().st_size == 0
            self.handle, self.close_after = open(p, "a", newline=""), True
        self.writer = csv.writer(self.handle, lineterminator="\n")
        if fresh:
            self.writer.writerow(columns)

    def row(self, values) -> None:
        self.writer.writerow([_fmt(v) for v in values])

    def close(self) -> None:
        if self.close_after:
            self.handle.close()
        else:
            self.handle.flush()


# ---------------------------------------------------------------------------
# gen

def cmd_gen(args) -> int:
    kind = GEN_KINDS[args.kind]
    if kind == "index-reduction":
        _require(args, "n", "eps")
        d = args.d or dim_for(args.n, args.eps)
        x = _bits(args.fill, args.n, d, args.seed)
        inst = build_index_instance(x, args.eps, seed=args.seed, eta=args.eta)
    elif kind == "window-reduction":
        _require(args, "n", "w", "eps")
        d = args.d or dim_for(args.n, args.eps)
        x = _bits(args.fill, args.w, d, args.seed)
        inst = build_window_instance(x, args.n, args.w, args.eps, seed=args.seed, eta=args.eta)
    elif kind == "time-family":
        _require(args, "n", "d", "i")
        inst = build_time_family(args.n, args.d, args.i)
    elif kind == "time-sigma":
        _require(args, "n", "d")
        inst = build_time_sigma(args.n, args.d)
    else:
        _require(args, "n", "d")
        inst = build_random_instance(args.n, args.d, args.seed)
    write_instance(inst, args.out)
    print(f"wrote {inst.instance_id} to {args.out}", file=sys.stderr)
    return EXIT_OK


def _bits(fill: str, rows: int, cols: int, seed: int) -> np.ndarray:
    if fill == "ones":
        return np.ones((rows, cols), dtype=np.int8)
    if fill == "zeros":
        return np.zeros((rows, cols), dtype=np.int8)
    return random_bits(rows, cols, seed)


def _require(args, *names) -> None:
    missing = [f"--{name}" for name in names if getattr(args, name) is None]
    if missing:
        raise UsageError(f"--kind {args.kind} needs {', '.join(missing)}")


# ---------------------------------------------------------------------------
# run

@dataclass
class RunSetup:
    estimator: str
    window: int | None
    steps: list[int]
    mean_lower_bound: float


def _run_setup(args, inst) -> RunSetup:
    n, d = inst.n, inst.d
    if args.estimator == "scalar-gumbel" and d != 1:
        raise UsageError(f"scalar-gumbel needs a d == 1 instance, got d = {d}")
    window = args.w if args.w is not None else inst.W
    if args.estimator.startswith("window") and window is None:
        raise UsageError(f"{args.estimator} needs --w (instance has no window width)")
    if window is not None and window < 1:
        raise UsageError("--w must be positive")
    steps = sorted(set(args.steps)) if args.steps else [n]
    if any(s < 1 or s > n for s in steps):
        raise UsageError(f"--steps must lie in 1..{n}")
    if args.estimator == "window-boosted":
        if args.eps is None or args.delta is None:
            raise UsageError("window-boosted needs --eps and --delta")
        boost_config(args.eps, args.delta, args.v_max, args.mean_lower_bound)
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    if args.estimator == "exact" and args.w is None:
        window = None
    return RunSetup(args.estimator, window, steps, args.mean_lower_bound)


def _oracle(inst, setup: RunSetup, step: int) -> np.ndarray:
    keys, values, q = inst.keys[:step], inst.values[:step], inst.queries[step - 1]
    if setup.window is None:
        return exact_attention(KvCache.from_arrays(keys, values), q)
    return window_attention_arrays(keys, values, q, setup.window)


def _rel_error(estimate: np.ndarray, exact: np.ndarray) -> np.ndarray:
    diff = np.abs(estimate - exact)
    scale = np.abs(exact)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(scale > 0, diff / np.where(scale > 0, scale, 1.0), np.where(diff > 0, np.inf, 0.0))


def _trial(inst, setup: RunSetup, args, seed: int):
    """Yield ``(step, estimate, stored_vectors, wall_ms)`` at each query step."""
    rng = np.random.default_rng(seed)
    stream = inst.stream
    wanted = set(setup.steps)
    d = inst.d
    t0 = time.perf_counter()
    if setup.estimator == "exact":
        for s in setup.steps:
            yield s, _oracle(inst, setup, s), s * 2 if setup.window is None else 2 * min(s, setup.window), t0
        return
    if setup.estimator == "window":
        state = WindowState(SlidingWindowSpec(setup.window), d)
        for s, triple in enumerate(stream, start=1):
            window_process(state, triple, rng)
            try:
                state.check_invariants()
            except AssertionError as exc:
                raise InvariantViolation(f"step {s}: {exc}") from exc
            if s in wanted:
                yield s, window_sample(state, triple.q, rng), state.stored_vectors, t0
        return
    if setup.estimator == "window-boosted":
        cfg = boost_config(args.eps, args.delta, args.v_max, args.mean_lower_bound)
        ens = WindowEnsemble(SlidingWindowSpec(setup.window), d, cfg.replicas, rng)
        for s, triple in enumerate(stream, start=1):
            ens.process(triple)
            if ens.stored_vectors > 2 * setup.window + 1:
                raise InvariantViolation(f"step {s}: {ens.stored_vectors} stored vectors exceeds 2W+1")
            if s in wanted:
                yield s, boosted_estimate(ens, triple.q, cfg, rng), ens.stored_vectors, t0
        return
    state = ScalarStreamState()
    for s, triple in enumerate(stream, start=1):
        state.update(float(triple.k[0]), float(triple.v[0]), rng)
        if state.retained_scalars > state.space_bound():
            raise InvariantViolation(f"step {s}: {state.retained_scalars} scalars exceeds {state.space_bound():.1f}")
        if s in wanted:
            value, _ = state.query(float(triple.q[0]), rng)
            yield s, np.array([value]), state.retained_scalars, t0


def cmd_run(args) -> int:
    inst = read_instance(args.instance)
    setup = _run_setup(args, inst)
    sink = CsvSink(args.out, RUN_COLUMNS)
    exact = {s: _oracle(inst, setup, s) for s in setup.steps}
    worst = []
    estimates = {s: [] for s in setup.steps}
    try:
        for t in range(args.trials):
            seed = args.seed + t
            trial_worst = 0.0
            for step, est, stored, t0 in _trial(inst, setup, args, seed):
                wall = int(round((time.perf_counter() - t0) * 1000)) if args.timing else 0
                rel = _rel_error(est, exact[step])
                keep = np.abs(exact[step]) >= setup.mean_lower_bound
                if keep.any():
                    trial_worst = max(trial_worst, float(rel[keep].max()))
                estimates[step].append(est)
                for c in range(inst.d):
                    sink.row([inst.instance_id, setup.estimator, step, c, exact[step][c], est[c], rel[c],
                              stored, stored * inst.d * 8, wall, seed])
            worst.append(trial_worst)
    finally:
        sink.close()
    if not args.check:
        return EXIT_OK
    ok, message = _run_check(setup, args, worst, estimates, exact)
    print(("PASS " if ok else "FAIL ") + message, file=sys.stderr)
    return EXIT_OK if ok else EXIT_CHECK


def _run_check(setup, args, worst, estimates, exact):
    if setup.estimator == "exact":
        top = max(worst)
        return top == 0.0, f"exact oracle max_rel_error {top}"
    if setup.estimator == "window-boosted":
        good = sum(w <= args.eps for w in worst)
        need = math.ceil((1 - args.delta) * len(worst))
        return good >= need, f"{good}/{len(worst)} trials with max_rel_error <= {args.eps} (need {need})"
    if len(worst) < 2:
        return False, "--check for a sampling estimator needs --trials >= 2"
    z = 0.0
    for s, draws in estimates.items():
        draws = np.array(draws)
        se = draws.std(axis=0, ddof=1) / math.sqrt(len(draws))
        gap = np.abs(draws.mean(axis=0) - exact[s])
        z = max(z, float(np.max(np.where(se > 0, gap / np.where(se > 0, se, 1.0), np.where(gap > 0, np.inf, 0.0)))))
    return z <= 3.0, f"trial mean within {z:.2f} standard errors of exact (tol 3)"


# ---------------------------------------------------------------------------
# decode

def cmd_decode(args) -> int:
    inst = read_instance(args.instance)
    if inst.kind not in ("index-reduction", "window-reduction"):
        raise UsageError(f"decode needs an index- or window-reduction instance, got {inst.kind}")
    rows = range(inst.x.shape[0]) if args.row is None else [args.row]
    if any(r < 0 or r >= inst.x.shape[0] for r in rows):
        raise UsageError(f"--row must lie in 0..{inst.x.shape[0] - 1}")
    eta = inst.eta if args.eta is None else args.eta
    perturb = multiplicative_perturbation(eta, args.seed) if eta > 0 else None
    rep = decode(inst, eta=eta, perturb=perturb, rows=rows)
    sink = CsvSink(args.out, DECODE_COLUMNS)
    wrong = 0
    try:
        for r in rows:
            for c in range(inst.d):
                bit = int(inst.x[r, c])
                decoded = int(rep.outputs[r, c] >= rep.th.cut)
                wrong += decoded != bit
                sink.row([inst.instance_id, r, c, rep.outputs[r, c], rep.th.cut, bit, decoded,
                          decoded == bit, rep.jl.passed, args.seed])
    finally:
        sink.close()
    total = len(rows) * inst.d
    print(f"decoded {total - wrong}/{total} bits; JL event {'passed' if rep.jl.passed else 'failed'} "
          f"(max inner-product error {rep.jl.max_cross_error:.3g}, tol {inst.eps})", file=sys.stderr)
    if wrong == 0:
        return EXIT_OK
    return EXIT_INVARIANT if rep.jl.passed else EXIT_CHECK


# ---------------------------------------------------------------------------
# cluster

def cmd_cluster(args) -> int:
    if (args.points is None) == (args.random is None):
        raise UsageError("give exactly one of --points FILE or --random COUNT D")
    if args.points is not None:
        points = np.atleast_2d(np.loadtxt(args.points, dtype=float, ndmin=2))
    else:
        count, d = args.random
        if count < 1 or d < 1:
            raise UsageError("--random needs positive COUNT and D")
        points = unit_ball_points(count, d, np.random.default_rng(args.seed))
    d = points.shape[1]
    assignment = greedy_cluster(points, args.radius)
    bound = covering_bound(d, args.radius)
    target = math.ceil(math.e**d)
    sink = CsvSink(args.out, CLUSTER_COLUMNS)
    try:
        sink.row([len(points), d, args.radius, assignment.count, bound, target, assignment.count <= target,
                  assignment.count <= bound * 4**d, assignment.max_center_distance(points), args.seed])
    finally:
        sink.close()
    if args.check and assignment.count > bound * 4**d:
        return EXIT_CHECK
    return EXIT_OK


# ---------------------------------------------------------------------------
# check

def cmd_check(args) -> int:
    from .checks import run_checks

    results = run_checks(quick=args.quick, only=args.only)
    for r in results:
        print(r.line(), flush=True)
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kvbound", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write an instance file")
    g.add_argument("--kind", choices=sorted(GEN_KINDS), required=True)
    g.add_argument("--n", type=int)
    g.add_argument("--d", type=int, help="embedding dimension (reductions default to the JL dimension)")
    g.add_argument("--w", type=int, help="window width (window kind)")
    g.add_argument("--eps", type=float)
    g.add_argument("--eta", type=float, default=0.0)
    g.add_argument("--i", type=int, help="spike position for --kind family (0-based)")
    g.add_argument("--fill", choices=("random", "ones", "zeros"), default="random", help="planted bit matrix")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="stream an instance through an estimator and compare with the exact oracle")
    r.add_argument("instance")
    r.add_argument("--estimator", choices=ESTIMATORS, default="exact")
    r.add_argument("--w", type=int, help="window width (defaults to the instance's)")
    r.add_argument("--eps", type=float)
    r.add_argument("--delta", type=float)
    r.add_argument("--v-max", type=float, default=2.0)
    r.add_argument("--mean-lower-bound", type=float, default=1.0)
    r.add_argument("--steps", type=int, nargs="+", help="1-based query steps (default: last)")
    r.add_argument("--trials", type=int, default=1)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default="-")
    r.add_argument("--check", action="store_true")
    r.add_argument("--timing", action="store_true", help="record wall_ms (otherwise 0 for reproducible output)")
    r.set_defaults(func=cmd_run)

    dcd = sub.add_parser("decode", help="recover planted bits from exact attention outputs")
    dcd.add_argument("instance")
    dcd.add_argument("--row", type=int, help="single planted row (default: all)")
    dcd.add_argument("--eta", type=float, help="multiplicative output noise (default: the instance's)")
    dcd.add_argument("--seed", type=int, default=0)
    dcd.add_argument("--out", default="-")
    dcd.set_defaults(func=cmd_decode)

    c = sub.add_parser("cluster", help="greedy covering of points in the unit ball")
    c.add_argument("--points", help="whitespace-separated text file, one point per line")
    c.add_argument("--random", type=int, nargs=2, metavar=("COUNT", "D"))
    c.add_argument("--radius", type=float, default=3 / math.e)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default="-")
    c.add_argument("--check", action="store_true")
    c.set_defaults(func=cmd_cluster)

    k = sub.add_parser("check", help="run the acceptance checks")
    k.add_argument("--quick", action="store_true", help="reduced sample sizes")
    k.add_argument("--only", nargs="+", help="substring filter on check names")
    k.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, DomainError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
