import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kvbound.attention import (
    DomainError, KvCache, SlidingWindowSpec, TokenTriple, attention_as_expectation, exact_attention,
    sliding_window_attention_exact, softmax, softmax_weights, window_attention_arrays,
)

finite = st.floats(-50, 50, allow_nan=False)


def test_softmax_uniform():
    assert np.allclose(softmax([0, 0, 0, 0]).weights, 0.25, atol=1e-15)


def test_softmax_exp_ratio():
    assert np.allclose(softmax([math.log(2), 0]).weights, [2 / 3, 1 / 3], atol=1e-15)


def test_softmax_large_scores_stable():
    w = softmax([1000, 999]).weights
    assert w == pytest.approx([math.e / (math.e + 1), 1 / (math.e + 1)], abs=1e-15)
    assert w[0] == pytest.approx(0.7310585786300049, abs=1e-15)


@pytest.mark.parametrize("bad", [[], [1.0, float("nan")], [float("inf"), 0.0]])
def test_softmax_domain(bad):
    with pytest.raises(DomainError):
        softmax(bad)


@given(arrays(np.float64, st.integers(1, 30), elements=finite), finite)
def test_softmax_shift_invariant(scores, shift):
    assert np.allclose(softmax_weights(scores), softmax_weights(scores + shift), atol=1e-12)


@given(arrays(np.float64, st.integers(1, 30), elements=finite))
def test_softmax_is_distribution(scores):
    w = softmax(scores).weights
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12


def test_exact_attention_two_zero_keys():
    cache = KvCache.from_arrays([[0.0], [0.0]], [[1.0], [3.0]])
    assert exact_attention(cache, [0.0])[0] == 2.0


def test_exact_attention_single_entry():
    cache = KvCache.from_arrays([[4.0, -7.0]], [[0.3, 9.0]])
    assert np.array_equal(exact_attention(cache, [100.0, 2.0]), [0.3, 9.0])


def test_exact_attention_matches_dense_oracle():
    rng = np.random.default_rng(11)
    K, V, q = rng.standard_normal((3, 2)), rng.standard_normal((3, 2)), rng.standard_normal(2)
    cache = KvCache(2)
    for k, v in zip(K, V):
        cache.append(k, v)
    e = np.exp(K @ q)
    assert np.allclose(exact_attention(cache, q), (e / e.sum()) @ V, atol=1e-14)


def test_exact_attention_errors():
    with pytest.raises(DomainError):
        exact_attention(KvCache(2), [0.0, 0.0])
    with pytest.raises(DomainError):
        exact_attention(KvCache.from_arrays([[1.0, 2.0]], [[1.0, 2.0]]), [1.0])


def test_expectation_form_scores():
    cache = KvCache.from_arrays([[math.log(3)], [0.0]], [[1.0], [0.0]])
    assert np.allclose(attention_as_expectation(cache, [1.0]).weights, [0.75, 0.25], atol=1e-15)


def test_expectation_form_uniform():
    cache = KvCache.from_arrays(np.ones((5, 2)), np.eye(5, 2))
    assert np.allclose(attention_as_expectation(cache, [0.5, 0.5]).weights, 0.2, atol=1e-15)


def test_expectation_form_matches_exact():
    rng = np.random.default_rng(3)
    cache = KvCache.from_arrays(rng.standard_normal((10, 4)), rng.standard_normal((10, 4)))
    q = rng.standard_normal(4)
    dist = attention_as_expectation(cache, q)
    assert np.allclose(dist.expectation(cache.value_matrix()), exact_attention(cache, q), atol=1e-9)


def _triples(keys, values, queries):
    return [TokenTriple(np.atleast_1d(q), np.atleast_1d(k), np.atleast_1d(v)) for q, k, v in zip(queries, keys, values)]


def test_window_hand_example():
    triples = _triples([5.0, 5.0, 2.0], [1.0, 2.0, 4.0], [0.0, 0.0, 1.0])
    got = sliding_window_attention_exact(triples, SlidingWindowSpec(1), 3)
    e2 = math.e**2
    assert got[0] == pytest.approx((1 + 2 + 4 * e2) / (2 + e2), abs=1e-14)
    assert got[0] == pytest.approx(3.4674651054039964, abs=1e-12)


def test_window_zero_query_averages_everything():
    rng = np.random.default_rng(5)
    K, V = rng.standard_normal((12, 3)), rng.standard_normal((12, 3))
    assert np.allclose(window_attention_arrays(K, V, np.zeros(3), 4), V.mean(axis=0), atol=1e-14)


def test_window_wide_equals_exact():
    rng = np.random.default_rng(6)
    K, V, Q = rng.standard_normal((9, 3)), rng.standard_normal((9, 3)), rng.standard_normal((9, 3))
    triples = [TokenTriple(q, k, v) for q, k, v in zip(Q, K, V)]
    got = sliding_window_attention_exact(triples, SlidingWindowSpec(20), 7)
    assert np.allclose(got, exact_attention(KvCache.from_arrays(K[:7], V[:7]), Q[6]), atol=1e-14)


def test_window_step_zero():
    triples = _triples([1.0], [1.0], [1.0])
    with pytest.raises(DomainError):
        sliding_window_attention_exact(triples, SlidingWindowSpec(1), 0)
    with pytest.raises(DomainError):
        SlidingWindowSpec(0)


@settings(max_examples=50)
@given(st.integers(1, 20), st.integers(1, 25), st.integers(0, 2**31))
def test_window_is_convex_combination(W, n, seed):
    rng = np.random.default_rng(seed)
    K, V, q = rng.standard_normal((n, 2)), rng.uniform(1, 2, (n, 2)), rng.standard_normal(2)
    out = window_attention_arrays(K, V, q, W)
    assert np.all(out >= V.min(axis=0) - 1e-12) and np.all(out <= V.max(axis=0) + 1e-12)
