"""Seeded dense Gaussian Johnson-Lindenstrauss projections.

``f(u) = A u / sqrt(d)`` with ``A`` of shape ``(d, n)`` and i.i.d. N(0, 1)
entries.  Column ``i`` of ``A`` is drawn from its own PCG64 stream keyed by
``SeedSequence(seed, spawn_key=(i,))`` using numpy's ziggurat
``standard_normal``.  Columns are therefore pure functions of ``(seed, i, d)``
and can be regenerated on demand in any order, which is what lets large
projectors skip materialising ``A``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ._num import clean_ceil
from .attention import DomainError, as_vector

MATERIALIZE_LIMIT = 2**26


def dim_for(n: int, eps: float) -> int:
    """Target dimension ``ceil(12 ln n / (eps^2 - eps^3))``."""
    if n < 2:
        raise DomainError("dim_for needs n >= 2")
    if not 0.0 < eps < 1.0:
        raise DomainError("eps must lie in (0, 1)")
    return clean_ceil(12.0 * math.log(n) / (eps**2 - eps**3))


def gaussian_column(seed: int, index: int, rows: int) -> np.ndarray:
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(int(index),))
    return np.random.Generator(np.random.PCG64(ss)).standard_normal(rows)


@dataclass(frozen=True)
class JlProjector:
    seed: int
    source_dim: int
    target_dim: int

    def __post_init__(self):
        if self.source_dim < 1 or self.target_dim < 1:
            raise DomainError("projector dimensions must be positive")

    @property
    def materialized(self) -> bool:
        return self.source_dim * self.target_dim <= MATERIALIZE_LIMIT

    def column(self, i: int) -> np.ndarray:
        """Raw (unscaled) column ``i`` of ``A``, 0-based."""
        if not 0 <= i < self.source_dim:
            raise DomainError(f"basis index {i} outside [0, {self.source_dim})")
        if self.materialized:
            return self.matrix[:, i].copy()
        return gaussian_column(self.seed, i, self.target_dim)

    @cached_property
    def matrix(self) -> np.ndarray:
        if not self.materialized:
            raise MemoryError(
                f"{self.target_dim}x{self.source_dim} projector exceeds {MATERIALIZE_LIMIT} entries"
            )
        a = np.empty((self.target_dim, self.source_dim))
        for i in range(self.source_dim):
            a[:, i] = gaussian_column(self.seed, i, self.target_dim)
        a.flags.writeable = False
        return a

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.target_dim)

    def project(self, x) -> np.ndarray:
        x = as_vector(x, self.source_dim, "x")
        if self.materialized:
            return self.scale * (self.matrix @ x)
        out = np.zeros(self.target_dim)
        for i in np.flatnonzero(x):
            out += x[i] * gaussian_column(self.seed, i, self.target_dim)
        return self.scale * out

    def project_basis(self, i: int) -> np.ndarray:
        """``f(e_i)`` for a 0-based basis index."""
        return self.scale * self.column(i)

    def project_many(self, points) -> np.ndarray:
        """Project each row of an ``(m, source_dim)`` array."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if pts.shape[1] != self.source_dim:
            raise DomainError(f"points have dim {pts.shape[1]}, expected {self.source_dim}")
        if self.materialized:
            return self.scale * (pts @ self.matrix.T)
        return np.vstack([self.project(p) for p in pts])


@dataclass(frozen=True)
class PreservationReport:
    max_cross_error: float
    max_norm_error: float
    pairs_checked: int
    eps: float

    @property
    def passed(self) -> bool:
        return self.max_cross_error <= self.eps and self.max_norm_error <= self.eps


def verify_pairwise(points, projected, eps: float) -> PreservationReport:
    """Exhaustively compare every inner product before and after projection.

    Points must have Euclidean norm at most 1.  This is the O(n^2 d) test
    oracle; there is no sampling shortcut.
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    f = np.atleast_2d(np.asarray(projected, dtype=np.float64))
    if p.shape[0] != f.shape[0]:
        raise DomainError(f"{p.shape[0]} points but {f.shape[0]} projections")
    if np.any(np.linalg.norm(p, axis=1) > 1.0 + 1e-9):
        raise DomainError("inner-product preservation requires ||p_i|| <= 1")
    diff = np.abs(p @ p.T - f @ f.T)
    m = p.shape[0]
    norm_err = float(diff.diagonal().max())
    cross_err = float(diff[~np.eye(m, dtype=bool)].max()) if m > 1 else 0.0
    return PreservationReport(cross_err, norm_err, m * (m - 1) // 2, eps)


def verify_basis(projector: JlProjector, indices, eps: float) -> PreservationReport:
    """:func:`verify_pairwise` on the standard basis vectors at ``indices``."""
    indices = list(indices)
    basis = np.zeros((len(indices), projector.source_dim))
    basis[np.arange(len(indices)), indices] = 1.0
    projected = np.vstack([projector.project_basis(i) for i in indices])
    return verify_pairwise(basis, projected, eps)
