"""Greedy covering of point sets in the unit ball and the matching
covering-number bound."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._num import clean_ceil
from .attention import DomainError


@dataclass(frozen=True)
class ClusterAssignment:
    centers: np.ndarray
    membership: np.ndarray
    radius: float

    @property
    def count(self) -> int:
        return len(self.centers)

    def max_center_distance(self, points) -> float:
        points = np.asarray(points, dtype=np.float64)
        return float(np.linalg.norm(points - self.centers[self.membership], axis=1).max())

    def max_diameter(self, points) -> float:
        """Largest pairwise distance inside any cluster (at most ``2 * radius``)."""
        points = np.asarray(points, dtype=np.float64)
        worst = 0.0
        for c in range(self.count):
            members = points[self.membership == c]
            if len(members) > 1:
                diff = members[:, None, :] - members[None, :, :]
                worst = max(worst, float(np.sqrt((diff**2).sum(-1)).max()))
        return worst


def _check_ball(points: np.ndarray) -> None:
    if np.any(np.linalg.norm(points, axis=1) > 1.0 + 1e-9):
        raise DomainError("points must lie in the unit ball")


def greedy_cluster(points, radius: float) -> ClusterAssignment:
    """Each point joins the first existing center within ``radius``;
    otherwise it becomes a new center."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if radius <= 0:
        raise DomainError("radius must be positive")
    _check_ball(pts)
    centers = np.empty_like(pts)
    m = 0
    membership = np.empty(len(pts), dtype=np.int64)
    r2 = radius * radius
    for j, p in enumerate(pts):
        if m:
            close = np.flatnonzero(((centers[:m] - p) ** 2).sum(axis=1) <= r2)
            if close.size:
                membership[j] = close[0]
                continue
        centers[m] = p
        membership[j] = m
        m += 1
    return ClusterAssignment(centers[:m].copy(), membership, radius)


def covering_bound(d: int, radius: float) -> int:
    """``ceil((3 / radius)^d)`` balls of the given radius cover the unit ball.

    Valid for ``0 < radius <= 3``: beyond 1 the bound is loose but still true,
    and past 3 it would drop below one ball.
    """
    if d < 1:
        raise DomainError("d must be positive")
    if not 0.0 < radius <= 3.0:
        raise DomainError("radius must lie in (0, 3]")
    return clean_ceil((3.0 / radius) ** d)


def unit_ball_points(count: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples from the closed unit ball in ``R^d``."""
    g = rng.standard_normal((count, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * rng.random((count, 1)) ** (1.0 / d)
