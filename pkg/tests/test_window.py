import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvbound.attention import DomainError, SlidingWindowSpec, TokenTriple, window_attention_arrays
from kvbound.instances import build_random_instance
from kvbound.window import (
    WindowEnsemble, WindowState, boost_config, boosted_estimate, branch_probability, median_of_means,
    window_process, window_sample,
)


def _feed(state, keys, values, rng, queries=None):
    queries = np.zeros_like(keys) if queries is None else queries
    for q, k, v in zip(queries, keys, values):
        window_process(state, TokenTriple(q, k, v), rng)
        state.check_invariants()
    return state


def test_first_w_updates_fill_buffers():
    rng = np.random.default_rng(0)
    state = WindowState(SlidingWindowSpec(4), 2)
    for i in range(4):
        window_process(state, TokenTriple(np.zeros(2), np.full(2, i), np.full(2, i)), rng)
        assert len(state.keys) == i + 1 and state.reservoir.held is None


def test_first_eviction_always_reserved():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        state = _feed(WindowState(SlidingWindowSpec(3), 1), np.arange(4.0)[:, None], np.arange(4.0)[:, None] + 10, rng)
        assert state.reservoir.held[0] == 10.0


def test_dim_mismatch():
    state = WindowState(SlidingWindowSpec(2), 3)
    with pytest.raises(DomainError):
        window_process(state, TokenTriple([0.0], [0.0], [0.0]), np.random.default_rng(0))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 60), st.integers(0, 2**32))
def test_invariants_hold_every_step(W, n, seed):
    rng = np.random.default_rng(seed)
    state = WindowState(SlidingWindowSpec(W), 2)
    _feed(state, rng.standard_normal((n, 2)), rng.standard_normal((n, 2)), rng)
    assert state.stored_vectors <= 2 * W + 1
    assert state.stored_bytes() == state.stored_vectors * 2 * 8


def test_reservoir_uniform_over_evicted():
    W, n = 3, 10
    counts = np.zeros(n)
    values = np.arange(n, dtype=float)[:, None]
    for seed in range(14_000):
        rng = np.random.default_rng(seed)
        state = _feed(WindowState(SlidingWindowSpec(W), 1), np.zeros((n, 1)), values, rng)
        counts[int(state.reservoir.held[0])] += 1
    frac = counts[: n - W] / counts.sum()
    assert counts[n - W:].sum() == 0
    assert np.all(np.abs(frac - 1 / (n - W)) < 0.015)


def test_exact_while_window_not_full():
    rng = np.random.default_rng(1)
    keys, values = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    state = _feed(WindowState(SlidingWindowSpec(8), 3), keys, values, rng)
    q = rng.standard_normal(3)
    outs = {tuple(window_sample(state, q, rng)) for _ in range(20)}
    assert len(outs) == 1
    assert np.allclose(next(iter(outs)), window_attention_arrays(keys, values, q, 8), atol=1e-15)


def test_branch_probability_far_outside():
    rng = np.random.default_rng(2)
    n, W = 10_000, 4
    state = _feed(WindowState(SlidingWindowSpec(W), 1), np.zeros((n, 1)), np.ones((n, 1)), rng)
    assert branch_probability(state, [0.0]) == pytest.approx(W / n, rel=1e-12)
    state.keys.append(np.array([-50.0]))
    assert branch_probability(state, [1.0]) < 1e-3


def test_window_sample_unbiased_small():
    inst = build_random_instance(40, 2, 7)
    W, draws = 5, 40_000
    ens = WindowEnsemble(SlidingWindowSpec(W), 2, draws, np.random.default_rng(0))
    for t in inst.stream:
        ens.process(t)
    sample = ens.sample(inst.queries[-1], np.random.default_rng(1))
    exact = window_attention_arrays(inst.keys, inst.values, inst.queries[-1], W)
    se = sample.std(axis=0, ddof=1) / math.sqrt(draws)
    assert np.all(np.abs(sample.mean(axis=0) - exact) <= 4 * se)


def test_ensemble_matches_independent_states_in_law():
    inst = build_random_instance(30, 1, 3)
    W, R = 4, 6000
    ens = WindowEnsemble(SlidingWindowSpec(W), 1, R, np.random.default_rng(0))
    for t in inst.stream:
        ens.process(t)
    a = ens.sample(inst.queries[-1], np.random.default_rng(1))[:, 0]
    b = []
    for r in range(R):
        rng = np.random.default_rng([r, 9])
        state = WindowState(SlidingWindowSpec(W), 1)
        for t in inst.stream:
            window_process(state, t, rng)
        b.append(window_sample(state, inst.queries[-1], rng)[0])
    se = math.sqrt(a.var() / R + np.var(b) / R)
    assert abs(a.mean() - np.mean(b)) <= 4 * se


def test_boost_config_examples():
    assert boost_config(1.0, 0.5, 3.0, 1.0).T == 9
    assert boost_config(0.5, 2 / math.e**12, 1.0).Q == 144
    cfg = boost_config(0.1, 0.05, 1.0, 1.0)
    assert (cfg.T, cfg.Q) == (300, 45)
    cfg = boost_config(0.1, 0.05, 2.0, 1.0)
    assert (cfg.T, cfg.Q, cfg.replicas) == (600, 45, 27_000)


@pytest.mark.parametrize("args", [(0.0, 0.1, 1.0), (1.5, 0.1, 1.0), (0.1, 0.0, 1.0), (0.1, 1.0, 1.0), (0.1, 0.1, 0.0)])
def test_boost_config_domain(args):
    with pytest.raises(DomainError):
        boost_config(*args)


def test_median_of_means_shape():
    draws = np.arange(12.0).reshape(12, 1)
    assert median_of_means(draws, 4, 3)[0] == pytest.approx(5.5)
    with pytest.raises(DomainError):
        median_of_means(draws, 5, 3)


def test_boosted_exact_regime():
    rng = np.random.default_rng(4)
    keys, values = rng.standard_normal((3, 2)), rng.uniform(1, 2, (3, 2))
    cfg = boost_config(0.5, 0.5, 2.0)
    states = [_feed(WindowState(SlidingWindowSpec(8), 2), keys, values, rng) for _ in range(cfg.replicas)]
    q = rng.standard_normal(2)
    assert np.allclose(boosted_estimate(states, q, cfg, rng), window_attention_arrays(keys, values, q, 8), atol=1e-14)


def test_boosted_single_draw_config():
    from kvbound.window import BoostConfig

    cfg = BoostConfig(1.0, 0.5, 1.0, 1.0, T=1, Q=1)
    inst = build_random_instance(20, 2, 5)
    a = WindowState(SlidingWindowSpec(3), 2)
    for t in inst.stream:
        window_process(a, t, np.random.default_rng(0))
    got = boosted_estimate([a], inst.queries[-1], cfg, np.random.default_rng(7))
    assert np.array_equal(got, window_sample(a, inst.queries[-1], np.random.default_rng(7)))
