"""Sliding-window attention with unmasked values in O(dW) space.

A :class:`WindowState` keeps the last ``W`` keys and values plus one value
vector drawn uniformly (by reservoir sampling) from everything that has left
the window.  Each call to :func:`window_sample` returns one unbiased draw of
the masked-score attention output; :func:`boosted_estimate` turns ``T * Q``
independent draws into a relative-error estimate by median-of-means.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .attention import DomainError, SlidingWindowSpec, TokenTriple, as_vector, softmax_weights, window_attention_arrays
from ._num import clean_ceil
from .sampling import Reservoir


@dataclass
class WindowState:
    spec: SlidingWindowSpec
    dim: int
    keys: deque = field(init=False)
    values: deque = field(init=False)
    reservoir: Reservoir = field(default_factory=Reservoir)
    step: int = 0

    def __post_init__(self):
        W = self.spec.window_width
        self.keys = deque(maxlen=W)
        self.values = deque(maxlen=W)

    @property
    def W(self) -> int:
        return self.spec.window_width

    @property
    def stored_vectors(self) -> int:
        return len(self.keys) + len(self.values) + (self.reservoir.held is not None)

    def stored_bytes(self) -> int:
        return self.stored_vectors * self.dim * 8

    def check_invariants(self) -> None:
        W = self.W
        if not len(self.keys) == len(self.values) == min(self.step, W):
            raise AssertionError(f"window holds {len(self.keys)} keys at step {self.step}")
        if self.stored_vectors > 2 * W + 1:
            raise AssertionError(f"{self.stored_vectors} stored vectors exceeds 2W+1")
        if self.reservoir.count != max(self.step - W, 0):
            raise AssertionError("reservoir count out of step with the stream")


def window_process(state: WindowState, triple: TokenTriple, rng: np.random.Generator) -> WindowState:
    if triple.dim != state.dim:
        raise DomainError(f"token dim {triple.dim} != state dim {state.dim}")
    evicted = state.values[0] if state.step >= state.W else None
    state.keys.append(triple.k)
    state.values.append(triple.v)
    state.step += 1
    if evicted is not None:
        # (i - W)-th offer, kept with probability 1 / (i - W)
        state.reservoir.offer(evicted, rng)
    return state


def _log_masses(scores: np.ndarray, outside: int) -> tuple[float, float]:
    """``(log S_W, log S)`` with ``S = outside + S_W``; outside scores are e^0."""
    log_sw = float(logsumexp(scores))
    log_s = float(np.logaddexp(log_sw, math.log(outside))) if outside > 0 else log_sw
    return log_sw, log_s


def branch_probability(state: WindowState, q) -> float:
    """Probability that :func:`window_sample` draws from inside the window."""
    q = as_vector(q, state.dim, "query")
    scores = np.asarray(state.keys) @ q
    log_sw, log_s = _log_masses(scores, max(state.step - state.W, 0))
    return math.exp(log_sw - log_s)


def window_sample(state: WindowState, q, rng: np.random.Generator) -> np.ndarray:
    if state.step == 0:
        raise DomainError("window_sample on an empty state")
    q = as_vector(q, state.dim, "query")
    keys = np.asarray(state.keys)
    values = np.asarray(state.values)
    if state.step <= state.W:
        return window_attention_arrays(keys, values, q, state.W)
    scores = keys @ q
    log_sw, log_s = _log_masses(scores, state.step - state.W)
    if rng.random() < math.exp(log_sw - log_s):
        ell = rng.choice(len(scores), p=softmax_weights(scores))
        return values[ell].copy()
    return np.array(state.reservoir.held, dtype=np.float64)


class WindowEnsemble:
    """``R`` independent window-estimator replicas over one shared input stream.

    The window buffers are identical across replicas, so they are held once
    and read by all; only the reservoir vector is per replica.  Accounting
    still charges each replica its own ``2W + 1`` vectors.
    """

    def __init__(self, spec: SlidingWindowSpec, dim: int, replicas: int, rng: np.random.Generator):
        self.spec = spec
        self.dim = dim
        self.replicas = replicas
        self.rng = rng
        self.keys: deque = deque(maxlen=spec.window_width)
        self.values: deque = deque(maxlen=spec.window_width)
        self.held = np.zeros((replicas, dim))
        self.step = 0

    @property
    def W(self) -> int:
        return self.spec.window_width

    @property
    def stored_vectors(self) -> int:
        """Vectors charged to one replica."""
        return len(self.keys) + len(self.values) + (self.step > self.W)

    def process(self, triple: TokenTriple) -> None:
        if triple.dim != self.dim:
            raise DomainError(f"token dim {triple.dim} != ensemble dim {self.dim}")
        evicted = self.values[0] if self.step >= self.W else None
        self.keys.append(triple.k)
        self.values.append(triple.v)
        self.step += 1
        if evicted is not None:
            offers = self.step - self.W
            replace = self.rng.random(self.replicas) * offers < 1.0
            self.held[replace] = evicted

    def sample(self, q, rng: np.random.Generator) -> np.ndarray:
        """One draw per replica, shape ``(replicas, dim)``."""
        if self.step == 0:
            raise DomainError("sample on an empty ensemble")
        q = as_vector(q, self.dim, "query")
        keys = np.asarray(self.keys)
        values = np.asarray(self.values)
        if self.step <= self.W:
            exact = window_attention_arrays(keys, values, q, self.W)
            return np.broadcast_to(exact, (self.replicas, self.dim)).copy()
        scores = keys @ q
        log_sw, log_s = _log_masses(scores, self.step - self.W)
        inside = rng.random(self.replicas) < math.exp(log_sw - log_s)
        out = self.held.copy()
        n_in = int(inside.sum())
        if n_in:
            ell = rng.choice(len(scores), size=n_in, p=softmax_weights(scores))
            out[inside] = values[ell]
        return out


@dataclass(frozen=True)
class BoostConfig:
    eps: float
    delta: float
    v_max: float
    mean_lower_bound: float
    T: int
    Q: int

    @property
    def replicas(self) -> int:
        return self.T * self.Q


def boost_config(eps: float, delta: float, v_max: float, mean_lower_bound: float = 1.0) -> BoostConfig:
    """Sample sizes for median-of-means boosting.

    ``T = ceil(3 v_max / (eps^2 mean_lower_bound))`` draws per group makes each
    group mean an eps-relative approximation with probability >= 2/3 by
    Chebyshev; ``Q = ceil(12 ln(2 / delta))`` groups push the median's
    two-sided failure probability below ``delta``.
    """
    if not 0 < eps <= 1:
        raise DomainError("eps must lie in (0, 1]")
    if not 0 < delta < 1:
        raise DomainError("delta must lie in (0, 1)")
    if v_max <= 0 or mean_lower_bound <= 0:
        raise DomainError("v_max and mean_lower_bound must be positive")
    T = clean_ceil(3.0 * v_max / (eps**2 * mean_lower_bound))
    Q = clean_ceil(12.0 * math.log(2.0 / delta))
    return BoostConfig(eps, delta, v_max, mean_lower_bound, T, Q)


def median_of_means(draws, T: int, Q: int) -> np.ndarray:
    """Median over ``Q`` groups of the mean of ``T`` consecutive draws."""
    draws = np.asarray(draws, dtype=np.float64)
    if draws.shape[0] != T * Q:
        raise DomainError(f"expected {T * Q} draws, got {draws.shape[0]}")
    return np.median(draws.reshape(Q, T, -1).mean(axis=1), axis=0)


def boosted_estimate(replicas, q, cfg: BoostConfig, rng: np.random.Generator) -> np.ndarray:
    """Median-of-means over one draw from each of ``cfg.T * cfg.Q`` replicas.

    ``replicas`` is either a :class:`WindowEnsemble` or a sequence of
    :class:`WindowState` that have all consumed the same stream.
    """
    if isinstance(replicas, WindowEnsemble):
        if replicas.replicas != cfg.replicas:
            raise DomainError(f"ensemble has {replicas.replicas} replicas, config needs {cfg.replicas}")
        draws = replicas.sample(q, rng)
    else:
        replicas = list(replicas)
        if len(replicas) != cfg.replicas:
            raise DomainError(f"got {len(replicas)} replicas, config needs {cfg.replicas}")
        if len({r.step for r in replicas}) > 1:
            raise DomainError("replicas are not at the same step")
        draws = np.vstack([window_sample(r, q, rng) for r in replicas])
    return median_of_means(draws, cfg.T, cfg.Q)
