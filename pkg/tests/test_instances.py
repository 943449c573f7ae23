import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvbound.attention import DomainError, KvCache, exact_attention, softmax_weights
from kvbound.instances import (
    ThresholdError, bob_query, build_index_instance, build_random_instance, build_time_family, build_time_sigma,
    build_window_instance, decode, instance_thresholds, jl_event, multiplicative_perturbation, random_bits,
    read_instance, readout, readout_constant, readout_weights, stream_differences, thresholds, write_instance,
)
from kvbound.jl import dim_for

N16_D = dim_for(16, 0.1)


def test_readout_constant():
    assert readout_constant(16, 0.1) == pytest.approx(math.log(1024), abs=1e-12)


def test_thresholds_closed_form():
    th = thresholds(16, math.log(1024), 0.1)
    assert th.lo == pytest.approx(1 / 17, abs=1e-15)
    assert th.hi == pytest.approx(16 / 17, abs=1e-15)


def test_eta_margin():
    th = thresholds(16, math.log(1024), 0.1, eta=0.5)
    assert 1.5 * th.lo == pytest.approx(1.5 / 17) and 0.5 * th.hi == pytest.approx(8 / 17)
    assert 1.5 * th.lo < th.cut < 0.5 * th.hi


@settings(max_examples=100)
@given(st.integers(2, 10**6), st.floats(0.01, 0.49), st.floats(0.0, 0.9))
def test_thresholds_symmetric(n, eps, eta):
    C = readout_constant(n, eps, eta)
    th = thresholds(n, C, eps, eta)
    assert th.lo + th.hi == pytest.approx(1.0, abs=1e-12)
    assert (1 + eta) * th.lo < (1 - eta) * th.hi


def test_threshold_violation_named():
    with pytest.raises(ThresholdError, match="<"):
        thresholds(16, 1.0, 0.1)


@pytest.mark.parametrize("eps", [0.5, 0.7, 0.0])
def test_eps_domain(eps):
    with pytest.raises(DomainError):
        build_index_instance(np.zeros((4, 8)), eps, seed=0)


def test_index_all_zero_and_all_one():
    for fill, check in ((0, lambda out, th: out <= th.lo), (1, lambda out, th: out >= th.hi)):
        inst = build_index_instance(np.full((16, N16_D), fill), 0.1, seed=2)
        assert jl_event(inst).passed
        th = instance_thresholds(inst)
        for i in range(16):
            assert np.all(check(readout(inst, i), th))


def test_index_spike_weight():
    inst = build_index_instance(random_bits(16, N16_D, 3), 0.1, seed=3)
    w = readout_weights(inst, 5)
    assert w[5] >= instance_thresholds(inst).hi and w.argmax() == 5


def test_index_decode_random_bits():
    inst = build_index_instance(random_bits(16, N16_D, 4), 0.1, seed=4)
    rep = decode(inst)
    assert rep.jl.passed and rep.all_correct and rep.failures == 0


def test_index_perturbed_decode():
    inst = build_index_instance(random_bits(16, N16_D, 5), 0.1, seed=5)
    rep = decode(inst, eta=0.5, perturb=multiplicative_perturbation(0.5, 5))
    assert rep.all_correct


def test_undersized_dimension_fails_jl():
    inst = build_index_instance(random_bits(16, 8, 0), 0.1, seed=0)
    rep = decode(inst)
    assert not rep.jl.passed and not rep.all_correct


def test_window_instance_layout():
    W, n = 8, 64
    d = dim_for(n, 0.1)
    inst = build_window_instance(random_bits(W, d, 1), n, W, 0.1, seed=1)
    assert not inst.keys[: n - W].any() and not inst.values[: n - W].any()
    assert list(inst.planted_rows()) == list(range(n - W, n))
    assert decode(inst).all_correct


def test_window_all_zero_below_lo():
    W, n = 8, 64
    d = dim_for(n, 0.1)
    inst = build_window_instance(np.zeros((W, d)), n, W, 0.1, seed=2)
    th = instance_thresholds(inst)
    assert all(np.all(readout(inst, i) <= th.lo) for i in range(W))


def test_window_full_width_matches_index_layout():
    x = random_bits(16, 50, 0)
    a = build_window_instance(x, 16, 16, 0.1, seed=0)
    b = build_index_instance(x, 0.1, seed=0)
    assert np.array_equal(a.keys, b.keys) and np.array_equal(a.values, b.values)
    assert np.allclose(readout(a, 3), readout(b, 3), atol=1e-15)


def test_bob_query():
    inst = build_index_instance(random_bits(4, 30, 0), 0.2, seed=0)
    bob = bob_query(inst, 2)
    assert np.array_equal(bob.q, inst.C * inst.keys[2]) and not bob.k.any() and not bob.v.any()
    with pytest.raises(DomainError):
        bob_query(inst, 4)


def test_time_sigma_output():
    inst = build_time_sigma(16, 4)
    assert not inst.keys.any()
    out = exact_attention(KvCache.from_arrays(inst.keys, inst.values), inst.queries[-1])
    assert np.allclose(out, 1.75, atol=1e-12)


@pytest.mark.parametrize("n", [16, 64, 100])
def test_time_family_spike(n):
    for i in (0, n // 2, n - 1):
        inst = build_time_family(n, 3, i)
        w = softmax_weights(inst.keys @ inst.queries[-1])
        assert w[i] == pytest.approx(1 - 1 / n, abs=1e-12)
        assert stream_differences(inst, build_time_sigma(n, 3)) == [i]


def test_time_sigma_ones_query_same_output():
    a, b = build_time_sigma(16, 2, "ones"), build_time_sigma(16, 2)
    oa = exact_attention(KvCache.from_arrays(a.keys, a.values), a.queries[-1])
    ob = exact_attention(KvCache.from_arrays(b.keys, b.values), b.queries[-1])
    assert np.array_equal(oa, ob)


def test_time_family_needs_square():
    with pytest.raises(DomainError):
        build_time_family(15, 2, 0)


@pytest.mark.parametrize("build", [
    lambda: build_index_instance(random_bits(6, 20, 1), 0.1, seed=1, eta=0.25),
    lambda: build_window_instance(random_bits(3, 20, 1), 10, 3, 0.2, seed=9),
    lambda: build_time_family(16, 3, 7),
    lambda: build_time_sigma(16, 3),
    lambda: build_random_instance(12, 5, 4),
])
def test_roundtrip(tmp_path, build):
    inst = build()
    path = tmp_path / "inst.txt"
    write_instance(inst, path)
    back = read_instance(path)
    for name in ("queries", "keys", "values"):
        assert np.array_equal(getattr(back, name), getattr(inst, name))
    assert (back.kind, back.n, back.d, back.W, back.eps, back.eta, back.C, back.seed, back.planted_index) == \
        (inst.kind, inst.n, inst.d, inst.W, inst.eps, inst.eta, inst.C, inst.seed, inst.planted_index)
    assert (back.x is None) == (inst.x is None)
    if inst.x is not None:
        assert np.array_equal(back.x, inst.x)
    write_instance(back, tmp_path / "again.txt")
    assert (tmp_path / "again.txt").read_bytes() == path.read_bytes()


def test_read_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("hello\n")
    with pytest.raises(DomainError):
        read_instance(p)
