"""Parameterized bump-channel geometry and Gordon-Hall transfinite maps.

The flow domain is a channel of height one whose bottom wall carries a
circular-arc bump of unit horizontal length between x1 = -0.5 and 0.5; the
channel spans x1 in [-1, 1.5]. The bump arc subtends an angle ``2*alpha``
at its center, so its radius is ``1 / (2 sin alpha)`` and its apex height
``0.5 * tan(alpha / 2)``; ``alpha = 0`` degenerates to a straight channel.
Boundary curves are parameterized over [0, 1] with the bump extrema pinned
at parameters 0.2 and 0.6.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ParameterVector",
    "PARAM_BOUNDS",
    "PARAM_CENTROID",
    "BoundaryCurves",
    "bump_channel_curves",
    "unit_square_curves",
    "gordon_hall",
    "gordon_hall_jacobian",
    "invert_gordon_hall",
    "GeometricMap",
    "InversionError",
    "bump_distance",
]

X_IN, X_OUT = -1.0, 1.5
BUMP_LEFT, BUMP_RIGHT = -0.5, 0.5
S_LEFT, S_RIGHT = 0.2, 0.6  # curve parameters of the bump extrema

PARAM_BOUNDS = np.array([[0.75, 0.80], [1.70, 1.80]])
PARAM_CENTROID = PARAM_BOUNDS.mean(axis=1)


@dataclass(frozen=True)
class ParameterVector:
    """Bump central half-angle and free-stream Mach number."""

    alpha: float
    mach: float
    extrapolation: bool = False

    def __post_init__(self):
        if not self.extrapolation:
            lo, hi = PARAM_BOUNDS[:, 0], PARAM_BOUNDS[:, 1]
            if not (lo[0] <= self.alpha <= hi[0] and lo[1] <= self.mach <= hi[1]):
                raise ValueError(
                    f"parameter ({self.alpha}, {self.mach}) outside the training "
                    "region; pass extrapolation=True to allow"
                )

    def as_array(self):
        return np.array([self.alpha, self.mach])


class BoundaryCurves:
    """Four boundary parameterizations of a Gordon-Hall patch.

    Each curve is a callable ``s -> (n, 2)`` with derivative callable; the
    container caches the patch corners for the transfinite formula.
    """

    def __init__(self, btm, btm_d, top, top_d, left, left_d, right, right_d):
        self.btm, self.btm_d = btm, btm_d
        self.top, self.top_d = top, top_d
        self.left, self.left_d = left, left_d
        self.right, self.right_d = right, right_d
        z, o = np.zeros(1), np.ones(1)
        self.c00 = btm(z)[0]
        self.c10 = btm(o)[0]
        self.c01 = top(z)[0]
        self.c11 = top(o)[0]
        for pair in ((self.c00, left(z)[0]), (self.c01, left(o)[0]),
                     (self.c10, right(z)[0]), (self.c11, right(o)[0])):
            if not np.allclose(pair[0], pair[1], atol=1e-12):
                raise ValueError("boundary curves do not meet at the corners")


def _line(p0, p1):
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)

    def ev(s):
        s = np.atleast_1d(np.asarray(s, float))
        return p0 + np.outer(s, p1 - p0)

    def dv(s):
        s = np.atleast_1d(np.asarray(s, float))
        return np.broadcast_to(p1 - p0, (len(s), 2)).copy()

    return ev, dv


def bump_channel_curves(alpha):
    """Boundary curves of the bump channel for half-angle `alpha` (>= 0)."""
    if alpha < 0:
        raise ValueError("bump angle must be nonnegative")
    top, top_d = _line((X_IN, 1.0), (X_OUT, 1.0))
    left, left_d = _line((X_IN, 0.0), (X_IN, 1.0))
    right, right_d = _line((X_OUT, 0.0), (X_OUT, 1.0))
    slope = X_OUT - X_IN  # 2.5, shared by both flat runs

    if alpha < 1e-14:
        btm, btm_d = _line((X_IN, 0.0), (X_OUT, 0.0))
        return BoundaryCurves(btm, btm_d, top, top_d, left, left_d, right, right_d)

    R = 0.5 / np.sin(alpha)
    cy = -R * np.cos(alpha)
    dth = 2.0 * alpha / (S_RIGHT - S_LEFT)

    def btm(s):
        s = np.atleast_1d(np.asarray(s, float))
        out = np.empty((len(s), 2))
        out[:, 0] = X_IN + slope * s
        out[:, 1] = 0.0
        on = (s > S_LEFT) & (s < S_RIGHT)
        th = -alpha + dth * (s[on] - S_LEFT)
        out[on, 0] = R * np.sin(th)
        out[on, 1] = cy + R * np.cos(th)
        return out

    def btm_d(s):
        s = np.atleast_1d(np.asarray(s, float))
        out = np.zeros((len(s), 2))
        out[:, 0] = slope
        on = (s > S_LEFT) & (s < S_RIGHT)
        th = -alpha + dth * (s[on] - S_LEFT)
        out[on, 0] = R * np.cos(th) * dth
        out[on, 1] = -R * np.sin(th) * dth
        return out

    return BoundaryCurves(btm, btm_d, top, top_d, left, left_d, right, right_d)


def unit_square_curves():
    """Identity patch: the Gordon-Hall map reduces to the identity."""
    btm, btm_d = _line((0, 0), (1, 0))
    top, top_d = _line((0, 1), (1, 1))
    left, left_d = _line((0, 0), (0, 1))
    right, right_d = _line((1, 0), (1, 1))
    return BoundaryCurves(btm, btm_d, top, top_d, left, left_d, right, right_d)


def gordon_hall(curves, x):
    """Transfinite interpolation of four boundary curves at points `x`."""
    x = np.atleast_2d(np.asarray(x, float))
    s, t = x[:, 0], x[:, 1]
    c = curves
    val = (
        (1 - t)[:, None] * c.btm(s)
        + t[:, None] * c.top(s)
        + (1 - s)[:, None] * c.left(t)
        + s[:, None] * c.right(t)
        - ((1 - s) * (1 - t))[:, None] * c.c00
        - (s * t)[:, None] * c.c11
        - (s * (1 - t))[:, None] * c.c10
        - ((1 - s) * t)[:, None] * c.c01
    )
    return val


def gordon_hall_jacobian(curves, x):
    """Jacobian of the transfinite map; shape (n, 2, 2)."""
    x = np.atleast_2d(np.asarray(x, float))
    s, t = x[:, 0], x[:, 1]
    c = curves
    d1 = (
        (1 - t)[:, None] * c.btm_d(s)
        + t[:, None] * c.top_d(s)
        - c.left(t)
        + c.right(t)
        + (1 - t)[:, None] * c.c00
        - t[:, None] * c.c11
        - (1 - t)[:, None] * c.c10
        + t[:, None] * c.c01
    )
    d2 = (
        -c.btm(s)
        + c.top(s)
        + (1 - s)[:, None] * c.left_d(t)
        + s[:, None] * c.right_d(t)
        + (1 - s)[:, None] * c.c00
        - s[:, None] * c.c11
        + s[:, None] * c.c10
        - (1 - s)[:, None] * c.c01
    )
    return np.stack([d1, d2], axis=-1)


class InversionError(RuntimeError):
    def __init__(self, points):
        self.points = np.atleast_2d(points)
        super().__init__(f"Gordon-Hall inversion failed at {self.points[0]}")


def _newton_invert(curves, y, x0, tol, maxit):
    x = x0.copy()
    ok = np.zeros(len(y), dtype=bool)
    for _ in range(maxit):
        r = gordon_hall(curves, x) - y
        ok = np.linalg.norm(r, axis=1) < tol
        if ok.all():
            break
        J = gordon_hall_jacobian(curves, x)
        step = np.linalg.solve(J[~ok], r[~ok, :, None])[..., 0]
        # damp long steps; the patch has unit scale
        nrm = np.linalg.norm(step, axis=1)
        step[nrm > 0.5] *= (0.5 / nrm[nrm > 0.5])[:, None]
        x[~ok] -= step
    if not ok.all():
        r = gordon_hall(curves, x) - y
        ok = np.linalg.norm(r, axis=1) < tol
    return x, ok


def invert_gordon_hall(curves, y, tol=1e-12, maxit=50):
    """Invert the Gordon-Hall map at physical points `y` by damped Newton.

    Falls back to a 3x3 grid of starting guesses; raises InversionError
    with the offending points if any remain unconverged.
    """
    y = np.atleast_2d(np.asarray(y, float))
    x, ok = _newton_invert(curves, y, np.full_like(y, 0.5), tol, maxit)
    if not ok.all():
        grid = np.linspace(0.1, 0.9, 3)
        for gx in grid:
            for gy in grid:
                bad = ~ok
                x0 = np.tile([gx, gy], (bad.sum(), 1))
                xb, okb = _newton_invert(curves, y[bad], x0, tol, maxit)
                x[np.where(bad)[0][okb]] = xb[okb]
                ok[np.where(bad)[0]] |= okb
                if ok.all():
                    break
            if ok.all():
                break
    if not ok.all():
        raise InversionError(y[~ok])
    return x


class GeometricMap:
    """Purely geometric deformation: push reference-domain points to the
    domain of a new parameter through the unit square."""

    def __init__(self, mu, mu_ref=None):
        a = mu.alpha if isinstance(mu, ParameterVector) else float(mu[0])
        self.curves = bump_channel_curves(a)
        if mu_ref is None:
            a0 = PARAM_CENTROID[0]
        else:
            a0 = mu_ref.alpha if isinstance(mu_ref, ParameterVector) else float(mu_ref[0])
        self.ref_curves = bump_channel_curves(a0)

    def pullback(self, x):
        """Unit-square coordinates of reference-domain points."""
        return invert_gordon_hall(self.ref_curves, x)

    def __call__(self, x):
        return gordon_hall(self.curves, self.pullback(x))

    def jacobian(self, x):
        xs = self.pullback(x)
        Jmu = gordon_hall_jacobian(self.curves, xs)
        Jref = gordon_hall_jacobian(self.ref_curves, xs)
        return Jmu @ np.linalg.inv(Jref)


def bump_distance(pts, alpha):
    """Distance from points to the bump arc (or to the flat chord if
    alpha == 0), used by the mesh size function."""
    pts = np.atleast_2d(np.asarray(pts, float))
    if alpha < 1e-14:
        dx = np.maximum(np.abs(pts[:, 0]) - 0.5, 0.0)
        return np.hypot(dx, pts[:, 1])
    R = 0.5 / np.sin(alpha)
    center = np.array([0.0, -R * np.cos(alpha)])
    rel = pts - center
    ang = np.arctan2(rel[:, 0], rel[:, 1])  # angle from vertical
    inside = np.abs(ang) <= alpha
    d = np.empty(len(pts))
    d[inside] = np.abs(np.linalg.norm(rel[inside], axis=1) - R)
    ends = np.array([[BUMP_LEFT, 0.0], [BUMP_RIGHT, 0.0]])
    douter = np.minimum(
        np.linalg.norm(pts - ends[0], axis=1), np.linalg.norm(pts - ends[1], axis=1)
    )
    d[~inside] = douter[~inside]
    return d
