"""Statistical and closed-form acceptance checks.

Each ``check_*`` function runs one experiment at the sizes given by its
keyword arguments (the defaults are the full acceptance sizes) and returns a
:class:`CheckResult`.  ``QUICK`` holds reduced sizes for smoke runs from the
CLI.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .attention import KvCache, SlidingWindowSpec, attention_as_expectation, exact_attention, softmax_weights, window_attention_arrays
from .covering import covering_bound, greedy_cluster, unit_ball_points
from .instances import (
    build_index_instance, build_random_instance, build_time_family, build_time_sigma, build_window_instance,
    decode, jl_event, multiplicative_perturbation, random_bits, readout_weights, stream_differences, thresholds,
)
from .jl import JlProjector, dim_for, verify_basis
from .sampling import ScalarStreamState, lazy_gumbel_samples
from .window import WindowEnsemble, WindowState, boost_config, boosted_estimate, window_process


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    limit_seconds: float | None = None

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        budget = f" / {self.limit_seconds:.0f}s" if self.limit_seconds else ""
        return f"[{status}] {self.name}: {self.detail} ({self.seconds:.1f}s{budget})"


def _timed(name: str, limit: float | None):
    def wrap(fn):
        def run(**kw) -> CheckResult:
            t0 = time.perf_counter()
            passed, detail = fn(**kw)
            return CheckResult(name, bool(passed), detail, time.perf_counter() - t0, limit)

        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        run.check_name = name
        return run

    return wrap


def _window_stream(n: int, d: int, seed: int):
    return build_random_instance(n, d, seed, value_range=(1.0, 2.0))


@_timed("1 expectation form", 5)
def check_expectation_form(streams: int = 50, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(streams):
        n, d = int(rng.integers(1, 257)), int(rng.integers(1, 17))
        cache = KvCache.from_arrays(rng.standard_normal((n, d)), rng.standard_normal((n, d)))
        q = rng.standard_normal(d) * rng.uniform(0.1, 3.0)
        dist = attention_as_expectation(cache, q)
        worst = max(worst, float(np.abs(exact_attention(cache, q) - dist.expectation(cache.value_matrix())).max()))
    return worst <= 1e-9, f"max deviation {worst:.2e} over {streams} streams (tol 1e-9)"


@_timed("2 window unbiasedness", 60)
def check_window_unbiased(n: int = 512, W: int = 32, d: int = 8, draws: int = 100_000, seeds: int = 10):
    worst = 0.0
    for seed in range(seeds):
        inst = _window_stream(n, d, seed)
        ens = WindowEnsemble(SlidingWindowSpec(W), d, draws, np.random.default_rng([seed, 1]))
        for t in inst.stream:
            ens.process(t)
        sample = ens.sample(inst.queries[-1], np.random.default_rng([seed, 2]))
        exact = window_attention_arrays(inst.keys, inst.values, inst.queries[-1], W)
        se = sample.std(axis=0, ddof=1) / math.sqrt(draws)
        worst = max(worst, float((np.abs(sample.mean(axis=0) - exact) / se).max()))
    return worst <= 3.0, f"max |mean - exact| = {worst:.2f} standard errors over {seeds} seeds x {d} coords (tol 3)"


@_timed("3 window space bound", 10)
def check_window_space(n: int = 100_000, widths=(8, 256), d: int = 4, seed: int = 0):
    from .attention import TokenTriple

    worst = {}
    for W in widths:
        rng = np.random.default_rng([seed, W])
        state = WindowState(SlidingWindowSpec(W), d)
        data = rng.standard_normal((n, 3, d))
        peak = 0
        for row in data:
            window_process(state, TokenTriple(row[0], row[1], row[2]), rng)
            state.check_invariants()
            peak = max(peak, state.stored_vectors)
        worst[W] = peak
    ok = all(peak <= 2 * W + 1 for W, peak in worst.items())
    return ok, ", ".join(f"W={W}: peak {p} <= {2 * W + 1}" for W, p in worst.items()) + f" over {n} updates"


@_timed("4 median-of-means boosting", 600)
def check_boosting(trials: int = 100, n: int = 512, W: int = 32, d: int = 4,
                   eps: float = 0.1, delta: float = 0.05, v_max: float = 2.0):
    cfg = boost_config(eps, delta, v_max, 1.0)
    if (cfg.T, cfg.Q) != (600, 45):
        return False, f"config T={cfg.T}, Q={cfg.Q}, expected 600, 45"
    good = 0
    for trial in range(trials):
        inst = _window_stream(n, d, 1000 + trial)
        ens = WindowEnsemble(SlidingWindowSpec(W), d, cfg.replicas, np.random.default_rng([trial, 1]))
        for t in inst.stream:
            ens.process(t)
        est = boosted_estimate(ens, inst.queries[-1], cfg, np.random.default_rng([trial, 2]))
        exact = window_attention_arrays(inst.keys, inst.values, inst.queries[-1], W)
        good += bool(np.all(np.abs(est - exact) <= eps * exact))
    need = math.ceil((1 - delta) * trials)
    return good >= need, f"T={cfg.T}, Q={cfg.Q}; {good}/{trials} trials within relative error {eps} (need {need})"


@_timed("5 lazy Gumbel sampling", 60)
def check_lazy_gumbel(sets: int = 20, n: int = 256, k: int = 16, draws: int = 100_000,
                      score_scale: float = 2.0, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst_tv, worst_probe = 0.0, 0.0
    for _ in range(sets):
        scores = rng.normal(0.0, score_scale, n)
        idx, probes = lazy_gumbel_samples(scores, k, rng, draws)
        freq = np.bincount(idx, minlength=n) / draws
        worst_tv = max(worst_tv, 0.5 * float(np.abs(freq - softmax_weights(scores)).sum()))
        worst_probe = max(worst_probe, float(probes.mean()))
    ok = worst_tv <= 0.02 and worst_probe <= 4 * math.sqrt(n)
    return ok, f"max TV {worst_tv:.4f} (tol 0.02), max mean probes {worst_probe:.2f} (tol {4 * math.sqrt(n):.0f})"


def scalar_stream(n: int, seed: int):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, n), rng.uniform(0.0, 1.0, n)


@_timed("6 scalar streaming attention", 60)
def check_scalar_attention(n: int = 256, runs: int = 10_000, q: float = 3.0, seed: int = 0):
    keys, values = scalar_stream(n, seed)
    exact = float(softmax_weights(q * keys) @ values)
    est = np.empty(runs)
    worst_ratio = 0.0
    for r in range(runs):
        rng = np.random.default_rng([seed, r])
        state = ScalarStreamState()
        for k, v in zip(keys, values):
            state.update(k, v, rng)
            worst_ratio = max(worst_ratio, state.retained_scalars / math.sqrt(state.n_seen))
        est[r] = state.query(q, rng)[0]
    z = abs(est.mean() - exact) / (est.std(ddof=1) / math.sqrt(runs))
    ok = z <= 3.0 and worst_ratio <= 8.0
    return ok, f"|mean - exact| = {z:.2f} SE (tol 3), max retained/sqrt(n) = {worst_ratio:.2f} (tol 8)"


@_timed("7 JL preservation", 120)
def check_jl(n: int = 64, eps: float = 0.3, seeds: int = 640):
    d = dim_for(n, eps)
    passed = sum(verify_basis(JlProjector(s, n, d), range(n), eps).passed for s in range(seeds))
    need = (1 - 2 / n) * seeds
    return passed >= need, f"d={d}: {passed}/{seeds} seeds preserve all pairs (need {need:.0f})"


@_timed("8 index-reduction decode", 30)
def check_index_decode(n: int = 16, eps: float = 0.1, seeds: int = 100):
    d = dim_for(n, eps)
    th = thresholds(n, math.log(1024), eps)
    if abs(th.lo - 1 / 17) > 1e-12 or abs(th.hi - 16 / 17) > 1e-12:
        return False, f"thresholds {th.lo}, {th.hi} differ from 1/17, 16/17"
    jl_fail, dec_fail = set(), set()
    for s in range(seeds):
        inst = build_index_instance(random_bits(n, d, s), eps, seed=s)
        if abs(inst.C - math.log(1024)) > 1e-12:
            return False, f"C={inst.C} differs from ln 1024"
        rep = decode(inst)
        if not rep.jl.passed:
            jl_fail.add(s)
        if not rep.all_correct:
            dec_fail.add(s)
    ok = dec_fail <= jl_fail
    return ok, (f"d={d}, lo=1/17, hi=16/17; {seeds - len(jl_fail)} JL-pass seeds, "
                f"decode failures on {sorted(dec_fail)} subset of JL failures {sorted(jl_fail)}")


@_timed("9 approximate decode margin", 30)
def check_approx_decode(n: int = 16, eps: float = 0.1, eta: float = 0.5, seeds: int = 100):
    th = thresholds(n, math.log(1024), eps, eta)
    lhs, rhs = (1 + eta) * th.lo, (1 - eta) * th.hi
    if not (lhs < rhs and abs(lhs - 1.5 / 17) < 1e-12 and abs(rhs - 8 / 17) < 1e-12):
        return False, f"margin {lhs:.4f} < {rhs:.4f} not as expected"
    d = dim_for(n, eps)
    failed = []
    checked = 0
    for s in range(seeds):
        inst = build_index_instance(random_bits(n, d, s), eps, seed=s)
        if not jl_event(inst).passed:
            continue
        checked += 1
        rep = decode(inst, eta=eta, perturb=multiplicative_perturbation(eta, s))
        if not rep.all_correct:
            failed.append(s)
    return not failed, f"(1+eta)lo = {lhs:.3f} < (1-eta)hi = {rhs:.3f}; perturbed decode failed on {failed} of {checked} JL-pass seeds"


@_timed("10 window-reduction decode", 30)
def check_window_decode(n: int = 64, W: int = 8, eps: float = 0.1, seeds: int = 100):
    d = dim_for(n, eps)
    jl_fail, dec_fail = set(), set()
    for s in range(seeds):
        inst = build_window_instance(random_bits(W, d, s), n, W, eps, seed=s)
        rep = decode(inst)
        if not rep.jl.passed:
            jl_fail.add(s)
        if not rep.all_correct:
            dec_fail.add(s)
    ok = dec_fail <= jl_fail and len(jl_fail) < seeds
    return ok, f"d={d}; decode failures {sorted(dec_fail)} subset of JL failures {sorted(jl_fail)} over {seeds} seeds"


@_timed("11 time-family construction", 5)
def check_time_family(n: int = 16, d: int = 4):
    sigma = build_time_sigma(n, d)
    cache = KvCache.from_arrays(sigma.keys, sigma.values)
    sig_out = exact_attention(cache, sigma.queries[-1])
    errs = [float(np.abs(sig_out - (2 - 1 / math.sqrt(n))).max())]
    diffs_ok = True
    for i in range(n):
        fam = build_time_family(n, d, i)
        w = softmax_weights(fam.keys @ fam.queries[-1])
        errs.append(abs(w[i] - (1 - 1 / n)))
        diffs_ok &= stream_differences(fam, sigma) == [i]
    worst = max(errs)
    return worst <= 1e-9 and diffs_ok, (
        f"sigma output {sig_out[0]:.12f} (expect 1.75), spike weights within {worst:.1e} of 1-1/n, "
        f"single-position difference: {diffs_ok}"
    )


@_timed("12 clusterability", 60)
def check_clusterability(dims=(1, 2, 3, 4, 5), points: int = 1000, seeds: int = 100):
    radius = 3 / math.e
    parts, ok = [], True
    for d in dims:
        target = math.ceil(math.e**d)
        cap = covering_bound(d, radius) * 4**d
        counts = np.array([greedy_cluster(unit_ball_points(points, d, np.random.default_rng([d, s])), radius).count
                           for s in range(seeds)])
        hits = int((counts <= target).sum())
        ok &= hits >= math.ceil(0.95 * seeds) and counts.max() <= cap
        parts.append(f"d={d}: {hits}/{seeds} <= {target}, max {counts.max()} <= {cap}")
    return ok, "; ".join(parts)


ALL_CHECKS = [
    check_expectation_form, check_window_unbiased, check_window_space, check_boosting, check_lazy_gumbel,
    check_scalar_attention, check_jl, check_index_decode, check_approx_decode, check_window_decode,
    check_time_family, check_clusterability,
]

QUICK = {
    "check_window_unbiased": dict(draws=20_000, seeds=2),
    "check_window_space": dict(n=10_000),
    "check_boosting": dict(trials=10),
    "check_lazy_gumbel": dict(sets=3),
    "check_scalar_attention": dict(runs=1000),
    "check_jl": dict(seeds=128),
    "check_index_decode": dict(seeds=10),
    "check_approx_decode": dict(seeds=5),
    "check_window_decode": dict(seeds=5),
    "check_clusterability": dict(seeds=20),
}


def run_checks(quick: bool = False, only=None) -> list[CheckResult]:
    results = []
    for check in ALL_CHECKS:
        if only and not any(tag in check.check_name for tag in only):
            continue
        kwargs = QUICK.get(check.__name__, {}) if quick else {}
        results.append(check(**kwargs))
    return results
