"""Exact attention semantics used as the oracle for every estimator.

All arithmetic is binary64.  Softmax always subtracts the max score first;
hard instances push scores to a few multiples of ``ln n`` and the time-family
construction produces weights like ``(n-1)**2`` so the naive form overflows
long before the interesting regimes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class DomainError(ValueError):
    """Raised when an input falls outside an operation's domain."""


def as_vector(x, dim: int | None = None, name: str = "vector") -> np.ndarray:
    """Validate ``x`` as a finite 1-D float64 array (optionally of length ``dim``)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1 or arr.size == 0:
        raise DomainError(f"{name} must be a nonempty 1-D sequence")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} has non-finite components")
    if dim is not None and arr.size != dim:
        raise DomainError(f"{name} has dim {arr.size}, expected {dim}")
    return arr


@dataclass(frozen=True)
class TokenTriple:
    """One stream unit ``(q, k, v)``; all three share a dimension."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        q = as_vector(self.q, name="q")
        k = as_vector(self.k, dim=q.size, name="k")
        v = as_vector(self.v, dim=q.size, name="v")
        for name, arr in (("q", q), ("k", k), ("v", v)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.q.size


@dataclass(frozen=True)
class SoftmaxDist:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0 or np.any(w < 0):
            raise DomainError("softmax weights must be a nonempty nonnegative vector")
        if abs(w.sum() - 1.0) > 1e-9:
            raise DomainError(f"softmax weights sum to {w.sum()!r}")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def support_size(self) -> int:
        return self.weights.size

    def expectation(self, rows) -> np.ndarray:
        """``E_{l ~ D}[rows[l]]`` for an ``(support_size, d)`` array."""
        rows = np.asarray(rows, dtype=np.float64)
        return self.weights @ rows


@dataclass(frozen=True)
class SlidingWindowSpec:
    window_width: int

    def __post_init__(self):
        if int(self.window_width) != self.window_width or self.window_width < 1:
            raise DomainError("window width must be a positive integer")


@dataclass
class KvCache:
    """Append-only exact key/value cache (the O(nd) baseline)."""

    dim: int
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise DomainError("cache dim must be a positive integer")

    def __len__(self) -> int:
        return len(self.keys)

    def append(self, k, v) -> None:
        k = as_vector(k, self.dim, "key")
        v = as_vector(v, self.dim, "value")
        self.keys.append(k)
        self.values.append(v)

    def key_matrix(self) -> np.ndarray:
        return np.vstack(self.keys) if self.keys else np.empty((0, self.dim))

    def value_matrix(self) -> np.ndarray:
        return np.vstack(self.values) if self.values else np.empty((0, self.dim))

    @classmethod
    def from_arrays(cls, keys, values) -> "KvCache":
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        if keys.shape != values.shape:
            raise DomainError(f"keys {keys.shape} and values {values.shape} differ")
        cache = cls(dim=keys.shape[1])
        for k, v in zip(keys, values):
            cache.append(k, v)
        return cache


def softmax_weights(scores) -> np.ndarray:
    """Max-shifted softmax on an array, without the dataclass wrapper."""
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - s.max())
    return e / e.sum()


def softmax(scores: Sequence[float]) -> SoftmaxDist:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise DomainError("softmax needs a nonempty 1-D score vector")
    if not np.all(np.isfinite(s)):
        raise DomainError("softmax scores must be finite")
    return SoftmaxDist(softmax_weights(s))


def _check_query(cache: KvCache, q) -> np.ndarray:
    if len(cache) == 0:
        raise DomainError("attention over an empty cache")
    return as_vector(q, cache.dim, "query")


def attention_as_expectation(cache: KvCache, q) -> SoftmaxDist:
    """The distribution ``D`` with ``Attn(q, K, V) = E_{l ~ D}[V_l]``."""
    q = _check_query(cache, q)
    return softmax(cache.key_matrix() @ q)


def exact_attention(cache: KvCache, q) -> np.ndarray:
    q = _check_query(cache, q)
    return softmax_weights(cache.key_matrix() @ q) @ cache.value_matrix()


def window_scores(keys: np.ndarray, q: np.ndarray, window: int) -> np.ndarray:
    """Scores for the last position attending to ``keys`` under a width-``window`` mask.

    Positions outside the window get score 0; they stay in the support.
    """
    n = keys.shape[0]
    scores = np.zeros(n)
    start = max(n - window, 0)
    scores[start:] = keys[start:] @ q
    return scores


def sliding_window_attention_exact(
    triples: Sequence[TokenTriple], spec: SlidingWindowSpec, step: int
) -> np.ndarray:
    """Masked-score attention of ``q_step`` over the first ``step`` tokens.

    ``step`` is 1-based.  Scores at positions ``<= step - W`` are replaced by
    zero but their values still contribute.
    """
    if step < 1:
        raise DomainError("step must be >= 1")
    if step > len(triples):
        raise DomainError(f"step {step} beyond stream length {len(triples)}")
    prefix = triples[:step]
    dim = prefix[0].dim
    if any(t.dim != dim for t in prefix):
        raise DomainError("mixed dimensions in stream")
    keys = np.vstack([t.k for t in prefix])
    values = np.vstack([t.v for t in prefix])
    return window_attention_arrays(keys, values, prefix[-1].q, spec.window_width)


def window_attention_arrays(keys, values, q, window: int) -> np.ndarray:
    """Array form of :func:`sliding_window_attention_exact` (no validation)."""
    keys = np.asarray(keys, dtype=np.float64)
    scores = window_scores(keys, np.asarray(q, dtype=np.float64), window)
    return softmax_weights(scores) @ np.asarray(values, dtype=np.float64)
