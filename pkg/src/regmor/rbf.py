"""Thin-plate-spline RBF regression over the parameter domain.

Wraps scipy's RBF interpolator (thin-plate-spline kernel, linear polynomial
tail) with input normalization to the unit box, a degenerate-data fallback
to a constant tail, and leave-one-out R-squared scoring.
"""

import numpy as np
from scipy.interpolate import RBFInterpolator

__all__ = ["RBFRegressor", "loo_r_squared", "NearestNeighborRegressor"]


class RBFRegressor:
    """Scalar thin-plate-spline regressor on normalized inputs."""

    def __init__(self, X, y):
        X = np.atleast_2d(np.asarray(X, float))
        y = np.asarray(y, float)
        if len(X) < 1:
            raise ValueError("empty training set")
        self.lo = X.min(axis=0)
        span = X.max(axis=0) - self.lo
        if (span <= 0).all():
            raise ValueError("degenerate parameter set: all points coincide")
        self.span = np.where(span > 0, span, 1.0)
        Xn = (X - self.lo) / self.span
        degree = 1 if len(X) >= 3 else 0
        try:
            self._rbf = RBFInterpolator(Xn, y, kernel="thin_plate_spline", degree=degree)
        except np.linalg.LinAlgError:
            self._rbf = RBFInterpolator(Xn, y, kernel="thin_plate_spline", degree=0)

    def __call__(self, X):
        X = np.atleast_2d(np.asarray(X, float))
        return self._rbf((X - self.lo) / self.span)


class NearestNeighborRegressor:
    """Vector-valued nearest-neighbor lookup (ties to the lowest index)."""

    def __init__(self, X, Y):
        self.X = np.atleast_2d(np.asarray(X, float))
        self.Y = np.asarray(Y, float)
        self.lo = self.X.min(axis=0)
        span = self.X.max(axis=0) - self.lo
        self.span = np.where(span > 0, span, 1.0)

    def __call__(self, X):
        X = np.atleast_2d(np.asarray(X, float))
        d = np.linalg.norm(
            (X[:, None, :] - self.X[None, :, :]) / self.span, axis=2
        )
        return self.Y[d.argmin(axis=1)]


def loo_r_squared(X, y):
    """Leave-one-out R-squared of the thin-plate-spline regressor.

    Zero-variance targets score 1.0 when reproduced and -inf otherwise.
    """
    X = np.atleast_2d(np.asarray(X, float))
    y = np.asarray(y, float)
    n = len(y)
    if n < 3:
        raise ValueError("leave-one-out validation needs at least 3 samples")
    pred = np.empty(n)
    for k in range(n):
        m = np.ones(n, bool)
        m[k] = False
        pred[k] = RBFRegressor(X[m], y[m])(X[k : k + 1])[0]
    ss_res = float(((pred - y) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot < 1e-28:
        return 1.0 if ss_res < 1e-20 else -np.inf
    return 1.0 - ss_res / ss_tot
