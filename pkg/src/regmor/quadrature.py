"""Quadrature rules on the unit triangle and the unit interval.

The unit triangle is ``{(x, y): x, y >= 0, x + y <= 1}`` (area 1/2). All
rules returned here have strictly positive weights.
"""

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

__all__ = ["triangle_rule", "interval_rule"]


def _orbit_center():
    return np.array([[1.0 / 3.0, 1.0 / 3.0]])


def _orbit3(a):
    # permutations of barycentric (1-2a, a, a)
    b = 1.0 - 2.0 * a
    return np.array([[b, a], [a, b], [a, a]])


# symmetric positive rules, (points, normalized weights summing to 1)
def _rule_3pt():
    pts = _orbit3(1.0 / 6.0)
    w = np.full(3, 1.0 / 3.0)
    return pts, w


def _rule_6pt():
    a1, w1 = 0.445948490915965, 0.223381589678011
    a2, w2 = 0.091576213509771, 0.109951743655322
    pts = np.vstack([_orbit3(a1), _orbit3(a2)])
    w = np.concatenate([np.full(3, w1), np.full(3, w2)])
    return pts, w


def _rule_7pt():
    a1, w1 = 0.470142064105115, 0.132394152788506
    a2, w2 = 0.101286507323456, 0.125939180544827
    pts = np.vstack([_orbit_center(), _orbit3(a1), _orbit3(a2)])
    w = np.concatenate([[0.225], np.full(3, w1), np.full(3, w2)])
    return pts, w


def _conical_rule(degree):
    """Conical-product rule, exact to total degree 2n-1 with n*n points."""
    n = (degree + 2) // 2
    tu, wu = roots_legendre(n)
    u = 0.5 * (tu + 1.0)
    wu = 0.5 * wu
    tv, wv = roots_jacobi(n, 1.0, 0.0)
    v = 0.5 * (tv + 1.0)
    wv = 0.25 * wv
    U, V = np.meshgrid(u, v, indexing="ij")
    pts = np.column_stack([(U * (1.0 - V)).ravel(), V.ravel()])
    w = np.outer(wu, wv).ravel()
    return pts, 2.0 * w  # raw weights sum to the triangle area 1/2


def triangle_rule(degree):
    """Return points ``(n, 2)`` and weights ``(n,)`` exact to `degree`.

    Weights are positive and sum to the triangle area 1/2.
    """
    if degree <= 2:
        pts, w = _rule_3pt()
    elif degree <= 4:
        pts, w = _rule_6pt()
    elif degree <= 5:
        pts, w = _rule_7pt()
    else:
        pts, w = _conical_rule(degree)
    return pts, 0.5 * w


def interval_rule(npts):
    """Gauss-Legendre rule on [0, 1], exact to degree 2*npts - 1."""
    t, w = roots_legendre(npts)
    return 0.5 * (t + 1.0), 0.5 * w
