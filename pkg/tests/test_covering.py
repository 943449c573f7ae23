import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvbound.attention import DomainError
from kvbound.covering import covering_bound, greedy_cluster, unit_ball_points


def test_identical_points_one_cluster():
    assert greedy_cluster(np.tile([0.3, -0.2, 0.1], (50, 1)), 0.01).count == 1


def test_antipodal_points():
    assert greedy_cluster([[1.0, 0.0], [-1.0, 0.0]], 0.5).count == 2


def test_d3_target():
    pts = unit_ball_points(1000, 3, np.random.default_rng(0))
    assert greedy_cluster(pts, 3 / math.e).count <= 21


@settings(max_examples=25)
@given(st.integers(1, 6), st.integers(1, 200), st.floats(2.0, 5.0), st.integers(0, 2**32))
def test_radius_two_single_cluster(d, count, radius, seed):
    pts = unit_ball_points(count, d, np.random.default_rng(seed))
    assert greedy_cluster(pts, radius).count == 1


@settings(max_examples=25)
@given(st.integers(1, 4), st.floats(0.2, 1.5), st.integers(0, 2**32))
def test_every_point_near_its_center(d, radius, seed):
    pts = unit_ball_points(300, d, np.random.default_rng(seed))
    a = greedy_cluster(pts, radius)
    assert a.max_center_distance(pts) <= radius + 1e-12
    assert a.max_diameter(pts) <= 2 * radius + 1e-12


def test_unit_ball_points_inside():
    pts = unit_ball_points(2000, 4, np.random.default_rng(1))
    assert np.linalg.norm(pts, axis=1).max() <= 1.0


def test_norm_violation():
    with pytest.raises(DomainError):
        greedy_cluster([[2.0, 0.0]], 0.5)


def test_covering_bound_examples():
    assert covering_bound(1, 0.75) == 4
    assert covering_bound(2, 0.3) == 100
    assert covering_bound(3, 3 / math.e) == 21


@pytest.mark.parametrize("radius", [0.0, -1.0, 3.5])
def test_covering_bound_domain(radius):
    with pytest.raises(DomainError):
        covering_bound(2, radius)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.floats(0.3, 1.5), st.integers(0, 2**32))
def test_greedy_within_safety_factor(d, radius, seed):
    pts = unit_ball_points(500, d, np.random.default_rng(seed))
    assert greedy_cluster(pts, radius).count <= math.ceil((6 / radius) ** d)
