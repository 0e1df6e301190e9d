import math

import numpy as np
import pytest

from biotfem.elements import edge_quadrature, triangle_quadrature
from biotfem.errors import ConfigurationError


def reference_moment(a, b):
    """Exact integral of x^a y^b over the reference triangle."""
    return math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)


@pytest.mark.parametrize("degree", [1, 2, 4, 6])
def test_triangle_rule_exactness(degree):
    rule = triangle_quadrature(degree)
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    pts, wts = rule.physical(verts)
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            approx = wts @ (pts[:, 0] ** a * pts[:, 1] ** b)
            assert abs(approx - reference_moment(a, b)) <= 1e-14, (a, b)


def test_triangle_rule_basic_properties():
    rule = triangle_quadrature(6)
    assert np.all(rule.weights > 0)
    assert abs(rule.weights.sum() - 0.5) <= 1e-14
    assert np.allclose(rule.points.sum(axis=1), 1.0, atol=1e-14)
    assert np.all(rule.points >= 0.0)


def test_triangle_area_example():
    rule = triangle_quadrature(1)
    assert abs(rule.weights.sum() - 0.5) <= 1e-15


def test_triangle_degree6_monomials():
    # expected values from the factorial moment formula a! b! / (a+b+2)!
    rule = triangle_quadrature(6)
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    pts, wts = rule.physical(verts)
    assert reference_moment(2, 2) == 1.0 / 180.0
    assert reference_moment(3, 3) == 1.0 / 1120.0
    assert abs(wts @ (pts[:, 0] ** 2 * pts[:, 1] ** 2) - 1.0 / 180.0) <= 1e-15
    assert abs(wts @ (pts[:, 0] ** 3 * pts[:, 1] ** 3) - 1.0 / 1120.0) <= 1e-15


def test_triangle_rule_requests_map_up():
    assert triangle_quadrature(3).degree >= 3
    assert triangle_quadrature(5).degree >= 5
    assert triangle_quadrature(0).degree >= 0


def test_triangle_unsupported_degree():
    with pytest.raises(ConfigurationError):
        triangle_quadrature(7)
    with pytest.raises(ConfigurationError):
        triangle_quadrature(-1)


def test_physical_mapping_shifted_triangle():
    rule = triangle_quadrature(2)
    verts = np.array([[1.0, 2.0], [3.0, 2.0], [1.0, 5.0]])
    pts, wts = rule.physical(verts)
    area = 3.0
    assert abs(wts.sum() - area) <= 1e-13
    # integral of x over the triangle: area * centroid_x
    assert abs(wts @ pts[:, 0] - area * verts[:, 0].mean()) <= 1e-13


def test_edge_rule_examples():
    s, w = edge_quadrature(6)
    assert abs(w.sum() - 1.0) <= 1e-15
    assert abs(w @ s**2 - 1.0 / 3.0) <= 1e-15
    assert abs(w @ s**6 - 1.0 / 7.0) <= 1e-15


@pytest.mark.parametrize("degree", [1, 3, 5, 9])
def test_edge_rule_exactness(degree):
    s, w = edge_quadrature(degree)
    for k in range(degree + 1):
        assert abs(w @ s**k - 1.0 / (k + 1)) <= 1e-14


def test_edge_unsupported_degree():
    with pytest.raises(ConfigurationError):
        edge_quadrature(-2)
    with pytest.raises(ConfigurationError):
        edge_quadrature(100)
