from math import factorial

import numpy as np
import pytest

from regmor.quadrature import interval_rule, triangle_rule


def tri_monomial_exact(i, j):
    # int over unit triangle of x^i y^j
    return factorial(i) * factorial(j) / factorial(i + j + 2)


@pytest.mark.parametrize("degree", range(1, 10))
def test_triangle_rule_exactness(degree):
    pts, w = triangle_rule(degree)
    assert (w > 0).all()
    assert abs(w.sum() - 0.5) < 1e-14
    for i in range(degree + 1):
        for j in range(degree + 1 - i):
            got = (w * pts[:, 0] ** i * pts[:, 1] ** j).sum()
            assert abs(got - tri_monomial_exact(i, j)) < 1e-12


def test_triangle_points_inside():
    for degree in range(1, 9):
        pts, _ = triangle_rule(degree)
        assert (pts >= 0).all() and (pts.sum(axis=1) <= 1 + 1e-14).all()


@pytest.mark.parametrize("n", [1, 2, 3, 4, 6])
def test_interval_rule(n):
    x, w = interval_rule(n)
    assert (w > 0).all()
    for k in range(2 * n):
        assert abs((w * x**k).sum() - 1.0 / (k + 1)) < 1e-14
