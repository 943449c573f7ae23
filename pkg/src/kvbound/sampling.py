"""Reservoir sampling, Gumbel-max sampling, lazy Gumbel sampling and the
sublinear-space scalar (d = 1) streaming attention estimator."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import bdtr, gammaln

from .attention import DomainError, TokenTriple, as_vector

# ---------------------------------------------------------------------------
# reservoir


@dataclass
class Reservoir:
    """Single-slot reservoir: after ``count`` offers each was kept w.p. 1/count."""

    held: object = None
    count: int = 0

    def offer(self, item, rng: np.random.Generator) -> bool:
        self.count += 1
        if self.count == 1 or rng.random() * self.count < 1.0:
            self.held = item
            return True
        return False


def reservoir_update(r: Reservoir, item, rng: np.random.Generator) -> Reservoir:
    r.offer(item, rng)
    return r


# ---------------------------------------------------------------------------
# Gumbel noise


def open_uniform(rng: np.random.Generator, size=None):
    """Uniform draws on the open interval (0, 1)."""
    u = rng.random(size)
    if size is None:
        while u == 0.0:
            u = rng.random()
        return u
    while True:
        zero = u == 0.0
        if not zero.any():
            return u
        u[zero] = rng.random(int(zero.sum()))


def gumbel_draw(u: float) -> float:
    """Inverse-CDF Gumbel(0, 1) draw from a uniform ``u`` in (0, 1)."""
    if not 0.0 < u < 1.0:
        raise DomainError(f"u={u!r} outside (0, 1)")
    return -math.log(-math.log(u))


def gumbel_noise(rng: np.random.Generator, size) -> np.ndarray:
    return -np.log(-np.log(open_uniform(rng, size)))


def conditional_gumbel_above(B, u):
    """Gumbel(0, 1) draw conditioned on exceeding ``B``, by inverse CDF.

    Computes ``F^-1(F(B) + u (1 - F(B)))`` with ``F(x) = exp(-exp(-x))`` via
    ``log1p``/``expm1`` so a large cutoff does not collapse ``1 - F(B)`` to 0.
    Accepts scalars or broadcastable arrays.
    """
    B_arr = np.asarray(B, dtype=np.float64)
    u_arr = np.asarray(u, dtype=np.float64)
    if np.any(~np.isfinite(B_arr)):
        raise DomainError("cutoff must be finite")
    if np.any((u_arr <= 0.0) | (u_arr >= 1.0)):
        raise DomainError("u must lie in (0, 1)")
    with np.errstate(over="ignore"):
        t = np.exp(-B_arr)
    survival = -np.expm1(-t)
    y = -np.log1p(-(1.0 - u_arr) * survival)
    x = np.maximum(-np.log(y), np.nextafter(B_arr, np.inf))
    return float(x) if x.ndim == 0 else x


def gumbel_max_sample(scores, rng: np.random.Generator) -> int:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise DomainError("gumbel_max_sample needs a nonempty score vector")
    return int(np.argmax(s + gumbel_noise(rng, s.size)))


def gumbel_max_samples(scores, rng: np.random.Generator, size: int) -> np.ndarray:
    """``size`` independent Gumbel-max draws, vectorised."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise DomainError("gumbel_max_samples needs a nonempty score vector")
    return np.argmax(s[None, :] + gumbel_noise(rng, (size, s.size)), axis=1)


# ---------------------------------------------------------------------------
# binomial by inversion


def _binomial_inversion_scalar(N: int, p: float, u: float) -> int:
    if N == 0 or p <= 0.0:
        return 0
    if p >= 1.0:
        return N
    if p > 0.5:
        return N - _binomial_inversion_scalar(N, 1.0 - p, 1.0 - u)
    ratio = p / (1.0 - p)
    log_p0 = N * math.log1p(-p)
    if log_p0 > -700.0:
        m, pmf = 0, math.exp(log_p0)
        cdf = pmf
        while u > cdf and m < N:
            pmf *= (N - m) / (m + 1) * ratio
            m += 1
            cdf += pmf
        return m
    # P(X = 0) underflows: start the search at the mode instead of at zero
    m = min(int((N + 1) * p), N)
    pmf = math.exp(
        gammaln(N + 1) - gammaln(m + 1) - gammaln(N - m + 1) + m * math.log(p) + (N - m) * math.log1p(-p)
    )
    cdf = float(bdtr(m, N, p))
    if u <= cdf:
        while m > 0 and u <= cdf - pmf:
            cdf -= pmf
            pmf *= m / ((N - m + 1) * ratio)
            m -= 1
        return m
    while u > cdf and m < N:
        pmf *= (N - m) / (m + 1) * ratio
        m += 1
        cdf += pmf
    return m


def binomial_inversion(N: int, p, u):
    """Smallest ``m`` with ``P(Bin(N, p) <= m) >= u``, element-wise.

    Exact sequential-search inversion (intended for ``N <= 1e6``).  The common
    case of small ``p`` is vectorised; the rest falls back to a scalar search
    that starts at the mode when ``P(X = 0)`` would underflow.
    """
    N = int(N)
    p_arr, u_arr = np.broadcast_arrays(np.atleast_1d(np.asarray(p, dtype=np.float64)),
                                       np.atleast_1d(np.asarray(u, dtype=np.float64)))
    p_arr = p_arr.copy()
    out = np.zeros(p_arr.shape, dtype=np.int64)
    if N > 0:
        with np.errstate(divide="ignore"):
            log_p0 = N * np.log1p(-np.minimum(p_arr, 0.5))
        fast = (p_arr <= 0.5) & (log_p0 > -700.0) & (p_arr > 0.0)
        if fast.any():
            pf, uf = p_arr[fast], u_arr[fast]
            ratio = pf / (1.0 - pf)
            pmf = np.exp(log_p0[fast])
            cdf = pmf.copy()
            m = np.zeros(pf.shape, dtype=np.int64)
            active = uf > cdf
            while active.any():
                mi = m[active]
                pmf[active] *= (N - mi) / (mi + 1) * ratio[active]
                m[active] = mi + 1
                cdf[active] += pmf[active]
                active &= (uf > cdf) & (m < N)
            out[fast] = m
        for idx in np.flatnonzero(~fast):
            out[idx] = _binomial_inversion_scalar(N, float(p_arr[idx]), float(u_arr[idx]))
    if np.ndim(p) == 0 and np.ndim(u) == 0:
        return int(out[0])
    return out


# ---------------------------------------------------------------------------
# lazy Gumbel sampling


def top_k_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ties broken by smaller index."""
    s = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(s.size), -s))
    return order[:k]


@dataclass(frozen=True)
class LazyDraw:
    index: int
    cutoff: float
    probes: int
    requested: int

    @property
    def truncated(self) -> bool:
        return self.probes < self.requested


TailSampler = Callable[[int, np.random.Generator], "tuple[np.ndarray, np.ndarray]"]


def array_tail(scores, top_idx) -> tuple[TailSampler, int]:
    """Tail sampler over ``[n] minus top_idx`` for a fully known score array."""
    s = np.asarray(scores, dtype=np.float64)
    mask = np.ones(s.size, dtype=bool)
    mask[np.asarray(top_idx)] = False
    rest = np.flatnonzero(mask)

    def sample(m: int, rng: np.random.Generator):
        pick = rest[rng.choice(rest.size, size=m, replace=False)]
        return pick, s[pick]

    return sample, rest.size


def lazy_gumbel_sample(top_idx, top_scores, rest: TailSampler, n: int, rng: np.random.Generator) -> LazyDraw:
    """One draw from softmax over ``n`` scores, touching only the top set and
    a Binomial number of uniformly sampled tail positions.

    ``top_idx``/``top_scores`` must be the ``k`` largest scores (no tail score
    may exceed ``min(top_scores)``).  ``rest(m, rng)`` returns ``m`` distinct
    tail positions chosen uniformly without replacement, with their scores; it
    may return fewer when it cannot supply ``m`` (the draw is then flagged
    ``truncated``).
    """
    top_idx = np.asarray(top_idx)
    top_scores = np.asarray(top_scores, dtype=np.float64)
    k = top_scores.size
    if k < 1:
        raise DomainError("lazy Gumbel sampling needs k >= 1")
    if k > n:
        raise DomainError(f"top set of size {k} exceeds n={n}")
    noisy = top_scores + gumbel_noise(rng, k)
    best = int(np.argmax(noisy))
    M = float(noisy[best])
    cutoff = M - float(top_scores.min())
    winner = int(top_idx[best])
    requested = 0
    got = 0
    if n > k:
        p_exceed = -math.expm1(-math.exp(-cutoff)) if cutoff > -700 else 1.0
        requested = binomial_inversion(n - k, p_exceed, open_uniform(rng))
        if requested:
            idx, sc = rest(requested, rng)
            got = len(idx)
            if got:
                tail_noisy = np.asarray(sc) + conditional_gumbel_above(cutoff, open_uniform(rng, got))
                j = int(np.argmax(tail_noisy))
                if tail_noisy[j] > M:
                    winner = int(idx[j])
    return LazyDraw(winner, cutoff, got, requested)


def lazy_gumbel_samples(scores, k: int, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised lazy Gumbel draws over a known score array.

    Same algorithm as :func:`lazy_gumbel_sample` with the top-set noise,
    cutoffs and Binomial counts computed for all ``size`` draws at once.
    Returns ``(indices, probe_counts)``.
    """
    s = np.asarray(scores, dtype=np.float64)
    n = s.size
    if not 1 <= k <= n:
        raise DomainError(f"need 1 <= k <= n, got k={k}, n={n}")
    top = top_k_indices(s, k)
    top_s = s[top]
    noisy = top_s[None, :] + gumbel_noise(rng, (size, k))
    best = np.argmax(noisy, axis=1)
    M = noisy[np.arange(size), best]
    cutoff = M - top_s.min()
    winners = top[best]
    probes = np.zeros(size, dtype=np.int64)
    if n > k:
        with np.errstate(over="ignore"):
            p_exceed = -np.expm1(-np.exp(-cutoff))
        probes = binomial_inversion(n - k, p_exceed, open_uniform(rng, size))
        mask = np.ones(n, dtype=bool)
        mask[top] = False
        rest = np.flatnonzero(mask)
        for m in np.unique(probes[probes > 0]):
            rows = np.flatnonzero(probes == m)
            # m distinct tail positions per row: the m smallest of iid uniforms
            keys = rng.random((rows.size, rest.size))
            pick = np.argpartition(keys, m - 1, axis=1)[:, :m] if m < rest.size else np.tile(np.arange(rest.size), (rows.size, 1))
            idx = rest[pick]
            tail_noisy = s[idx] + conditional_gumbel_above(cutoff[rows, None], open_uniform(rng, idx.shape))
            j = np.argmax(tail_noisy, axis=1)
            wins = tail_noisy[np.arange(rows.size), j] > M[rows]
            winners[rows[wins]] = idx[wins, j[wins]]
    return winners, probes


# ---------------------------------------------------------------------------
# d = 1 streaming attention


class _ExactTopBuffer:
    """The exact top-|buffer| set of a stream under a growing capacity.

    Ranks are ``(sign * key, -index)`` so ties go to the smaller index.  Once
    an item is dropped (or never admitted) the buffer never admits anything
    ranked at or below it, so the buffer is always exactly the highest-ranked
    ``len(buffer)`` items seen, even right after the capacity grows.
    """

    def __init__(self, sign: float):
        self.sign = sign
        self.heap: list = []  # min-heap of (rank, index)
        self.members: set = set()
        self.watermark = None

    def __len__(self):
        return len(self.heap)

    def indices(self) -> list:
        return [i for _, i in self.heap]

    def push(self, key: float, index: int, capacity: int) -> list:
        """Offer an item; returns the indices that left (or never entered)."""
        rank = (self.sign * key, -index)
        if self.watermark is not None and rank <= self.watermark:
            return [index]
        heapq.heappush(self.heap, (rank, index))
        self.members.add(index)
        out = []
        while len(self.heap) > capacity:
            dropped, i = heapq.heappop(self.heap)
            self.members.discard(i)
            out.append(i)
            if self.watermark is None or dropped > self.watermark:
                self.watermark = dropped
        return out


class ScalarStreamState:
    """O(sqrt n) state for sampling-based attention over a scalar stream.

    Holds the exact top and bottom ``ceil(sqrt n)`` keys (capacity grows with
    the stream) and a Bernoulli pool: each arriving item draws a private
    priority and is kept while ``priority < pool_rate / sqrt(n)``.  Because
    membership depends only on priorities, never on keys, the pool restricted
    to any key-defined tail is a uniform subset of that tail given its size,
    which is what lazy Gumbel sampling needs from its tail probes.
    """

    SPACE_CONSTANT = 8.0

    def __init__(self, pool_rate: float = 1.5, refill: bool = True):
        self.pool_rate = pool_rate
        self.refill = refill
        self.n_seen = 0
        self.top = _ExactTopBuffer(+1.0)
        self.bottom = _ExactTopBuffer(-1.0)
        self.pool: dict[int, float] = {}  # index -> priority
        self._pool_heap: list = []  # max-heap of (-priority, index)
        self.items: dict[int, tuple[float, float]] = {}  # index -> (key, value)
        self.threshold = 1.0
        self.pool_cap_hits = 0
        self.short_queries = 0

    @property
    def capacity(self) -> int:
        return math.ceil(math.sqrt(self.n_seen))

    def item_budget(self) -> int:
        """Distinct (key, value) pairs allowed: ``SPACE_CONSTANT * sqrt(n) / 2``."""
        return math.floor(self.SPACE_CONSTANT / 2 * math.sqrt(self.n_seen))

    @property
    def retained_scalars(self) -> int:
        return 2 * len(self.items)

    def space_bound(self) -> float:
        return self.SPACE_CONSTANT * math.sqrt(max(self.n_seen, 1))

    def _release(self, index: int) -> None:
        if index not in self.top.members and index not in self.bottom.members and index not in self.pool:
            self.items.pop(index, None)

    def _pop_pool(self) -> float:
        neg, i = heapq.heappop(self._pool_heap)
        del self.pool[i]
        self._release(i)
        return -neg

    def update(self, key: float, value: float, rng: np.random.Generator) -> None:
        index = self.n_seen
        self.n_seen += 1
        self.items[index] = (float(key), float(value))

        cap = self.capacity
        for i in self.top.push(key, index, cap) + self.bottom.push(key, index, cap):
            if i != index:
                self._release(i)

        self.threshold = min(self.threshold, self.pool_rate / math.sqrt(self.n_seen))
        priority = rng.random()
        if priority < self.threshold:
            self.pool[index] = priority
            heapq.heappush(self._pool_heap, (-priority, index))
        while self._pool_heap and -self._pool_heap[0][0] >= self.threshold:
            self._pop_pool()
        self._release(index)
        budget = self.item_budget()
        while len(self.items) > budget and self.pool:
            # lower the threshold to the largest retained priority
            self.threshold = self._pop_pool()
            self.pool_cap_hits += 1

    def query(self, q: float, rng: np.random.Generator) -> tuple[float, LazyDraw]:
        if self.n_seen == 0:
            raise DomainError("query on an empty scalar stream state")
        buf = self.top if q >= 0 else self.bottom
        top_idx = np.array(buf.indices())
        keys = np.array([self.items[i][0] for i in top_idx])
        tail = np.array([i for i in self.pool if i not in buf.members], dtype=np.int64)
        tail_scores = q * np.array([self.items[i][0] for i in tail]) if tail.size else np.empty(0)

        def rest(m: int, rng: np.random.Generator):
            if tail.size == 0:
                return tail, tail_scores
            take = min(m, tail.size)
            pick = rng.choice(tail.size, size=take, replace=False)
            if m > take:
                self.short_queries += 1
            if m > take and self.refill:
                # pool exhausted: stand in for the missing tail probes with
                # pool members drawn with replacement
                pick = np.concatenate([pick, rng.integers(0, tail.size, size=m - take)])
            return tail[pick], tail_scores[pick]

        draw = lazy_gumbel_sample(top_idx, q * keys, rest, self.n_seen, rng)
        return self.items[draw.index][1], draw


def scalar_attention_update(state: ScalarStreamState, triple: TokenTriple, rng) -> ScalarStreamState:
    if triple.dim != 1:
        raise DomainError(f"scalar attention needs d == 1, got d={triple.dim}")
    state.update(float(triple.k[0]), float(triple.v[0]), rng)
    return state


def scalar_attention_query(state: ScalarStreamState, q, rng) -> float:
    q = float(as_vector(q, 1, "query")[0])
    return state.query(q, rng)[0]
