"""Constrained polynomial displacement spaces and parametric domain maps.

Displacements live in the tensorized-polynomial space of degree J per
coordinate whose normal trace vanishes on the unit-square boundary and
whose value is pinned to zero at (0.2, 0) and (0.6, 0). The span is
orthonormalized in the inner product combining second derivatives and
values, so a coefficient vector's Euclidean norm equals the norm of the
displacement it generates.

A parametric map pushes reference-domain points through the unit square:
pull back with the centroid-parameter patch, displace, then push forward
with the target-parameter patch.
"""

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import legendre as npleg
from scipy.linalg import null_space
from scipy.special import roots_legendre

from .geometry import (
    PARAM_CENTROID,
    ParameterVector,
    bump_channel_curves,
    gordon_hall,
    gordon_hall_jacobian,
    invert_gordon_hall,
)

__all__ = [
    "MappingSpace",
    "full_mapping_space",
    "BijectivityConfig",
    "jacobian_determinant",
    "bijectivity_constraint",
    "SpectralMap",
    "PINNED_PARAMS",
]

PINNED_PARAMS = (0.2, 0.6)


def _leg_tables(x, J):
    """Shifted-Legendre values and first/second derivatives at x in [0,1].

    Returns three (len(x), J+1) arrays.
    """
    t = 2.0 * np.asarray(x, float) - 1.0
    eye = np.eye(J + 1)
    V0 = npleg.legvander(t, J)
    d1 = npleg.legder(eye, 1, axis=0)
    d2 = npleg.legder(eye, 2, axis=0)
    V1 = 2.0 * (npleg.legvander(t, J - 1) @ d1 if J >= 1 else np.zeros((len(t), J + 1)))
    V2 = 4.0 * (npleg.legvander(t, J - 2) @ d2 if J >= 2 else np.zeros((len(t), J + 1)))
    return V0, V1, V2


class MappingSpace:
    """Span of displacement modes stored as Legendre coefficient tensors.

    `modes` has shape (M, 2, J+1, J+1): mode, component, x-degree, y-degree.
    Modes are orthonormal in the second-derivative-plus-value inner product,
    making coefficient vectors isometric to displacements.
    """

    def __init__(self, J, modes):
        self.J = J
        self.modes = np.asarray(modes, float)
        self.dim = self.modes.shape[0]

    def combine(self, a):
        """Coefficient tensor (2, J+1, J+1) of the displacement sum(a_m phi_m)."""
        return np.tensordot(np.asarray(a, float), self.modes, axes=(0, 0))

    def subspace(self, W):
        """New space whose modes are the columns of W in the current basis."""
        W = np.asarray(W, float)
        return MappingSpace(self.J, np.tensordot(W.T, self.modes, axes=(1, 0)))

    # -- pointwise evaluation ------------------------------------------------
    def _tables(self, pts):
        pts = np.atleast_2d(pts)
        Vx = _leg_tables(pts[:, 0], self.J)
        Vy = _leg_tables(pts[:, 1], self.J)
        return Vx, Vy

    def displacement(self, a, pts):
        """phi(pts) for coefficients a; shape (n, 2)."""
        C = self.combine(a)
        (X0, _, _), (Y0, _, _) = self._tables(pts)
        return np.einsum("qa,cab,qb->qc", X0, C, Y0)

    def displacement_gradient(self, a, pts):
        """Jacobian of phi at pts; shape (n, 2, 2) with [i, j] = d phi_i / d x_j."""
        C = self.combine(a)
        (X0, X1, _), (Y0, Y1, _) = self._tables(pts)
        gx = np.einsum("qa,cab,qb->qc", X1, C, Y0)
        gy = np.einsum("qa,cab,qb->qc", X0, C, Y1)
        return np.stack([gx, gy], axis=-1)

    def basis_values(self, pts):
        """All modes at pts; shape (M, n, 2)."""
        (X0, _, _), (Y0, _, _) = self._tables(pts)
        T = np.tensordot(self.modes, Y0, axes=([3], [1]))  # (M,2,A,q)
        return np.einsum("qa,mcaq->mqc", X0, T)

    def basis_gradients(self, pts):
        """Mode Jacobians at pts; shape (M, n, 2, 2)."""
        (X0, X1, _), (Y0, Y1, _) = self._tables(pts)
        T0 = np.tensordot(self.modes, Y0, axes=([3], [1]))
        T1 = np.tensordot(self.modes, Y1, axes=([3], [1]))
        gx = np.einsum("qa,mcaq->mqc", X1, T0)
        gy = np.einsum("qa,mcaq->mqc", X0, T1)
        return np.stack([gx, gy], axis=-1)

    def h2_norm_sq(self, a, quad_n=None):
        """Quadrature value of the regularization norm of sum(a_m phi_m).

        Equals ||a||^2 up to roundoff by construction; kept as an explicit
        integral for verification, with gradient 2 * Gram @ a.
        """
        n = quad_n or (self.J + 1)
        t, w = roots_legendre(n)
        x = 0.5 * (t + 1.0)
        w = 0.5 * w
        X0, X1, X2 = _leg_tables(x, self.J)
        C = self.combine(a)

        def comp_terms(Cc):
            dxx = np.einsum("qa,ab,rb->qr", X2, Cc, X0)
            dxy = np.einsum("qa,ab,rb->qr", X1, Cc, X1)
            dyy = np.einsum("qa,ab,rb->qr", X0, Cc, X2)
            val = np.einsum("qa,ab,rb->qr", X0, Cc, X0)
            return dxx**2 + 2.0 * dxy**2 + dyy**2 + val**2

        cell = comp_terms(C[0]) + comp_terms(C[1])
        return float(np.einsum("q,r,qr->", w, w, cell))


def _h2_gram_1comp(J):
    n = J + 1  # exact for products of degree <= 2J via n-point Gauss
    t, w = roots_legendre(n + 1)
    x = 0.5 * (t + 1.0)
    w = 0.5 * w
    V0, V1, V2 = _leg_tables(x, J)
    T0 = np.einsum("q,qa,qb->ab", w, V0, V0)
    T1 = np.einsum("q,qa,qb->ab", w, V1, V1)
    T2 = np.einsum("q,qa,qb->ab", w, V2, V2)
    return (
        np.kron(T2, T0) + 2.0 * np.kron(T1, T1) + np.kron(T0, T2) + np.kron(T0, T0)
    )


def full_mapping_space(J=15):
    """Build the full constrained displacement space for degree J."""
    n1 = J + 1
    sz = n1 * n1
    P0, _, _ = _leg_tables(np.array([0.0, 1.0, *PINNED_PARAMS]), J)
    at0, at1, atL, atR = P0

    rows = []
    # component 1 vanishes on the vertical edges x=0 and x=1
    for edge in (at0, at1):
        for b in range(n1):
            r = np.zeros(2 * sz)
            r[np.arange(n1) * n1 + b] = edge
            rows.append(r)
    # component 2 vanishes on the horizontal edges y=0 and y=1
    for edge in (at0, at1):
        for a in range(n1):
            r = np.zeros(2 * sz)
            r[sz + a * n1 + np.arange(n1)] = edge
            rows.append(r)
    # component 1 pinned at the bump extrema on the bottom edge
    for pt in (atL, atR):
        r = np.zeros(2 * sz)
        r[:sz] = np.outer(pt, at0).ravel()
        rows.append(r)

    N = null_space(np.array(rows))
    G1 = _h2_gram_1comp(J)
    G = np.zeros((2 * sz, 2 * sz))
    G[:sz, :sz] = G1
    G[sz:, sz:] = G1
    B = N
    for _ in range(2):  # repeated Cholesky correction for a clean Gram
        H = B.T @ G @ B
        L = np.linalg.cholesky(0.5 * (H + H.T))
        B = np.linalg.solve(L, B.T).T
    modes = B.T.reshape(-1, 2, n1, n1)
    return MappingSpace(J, modes)


@dataclass(frozen=True)
class BijectivityConfig:
    """Constants of the Jacobian-band constraint integral."""

    eps: float = 0.1
    c_exp: float = 0.0025  # 0.025 * eps
    delta: float = 1.0
    grid_n: int = 32


def _safe_exp(z, zmax=600.0):
    """exp with C^1 linear continuation above zmax to avoid overflow."""
    zc = np.minimum(z, zmax)
    e = np.exp(zc)
    val = np.where(z > zmax, e * (1.0 + (z - zmax)), e)
    return val, np.where(z > zmax, e, e)


def _constraint_grid(n):
    t, w = roots_legendre(n)
    x = 0.5 * (t + 1.0)
    w = 0.5 * w
    X, Y = np.meshgrid(x, x, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    return pts, np.outer(w, w).ravel()


def jacobian_determinant(space, a, pts, with_grad=False):
    """det(I + grad phi) at pts, optionally with its gradient in a."""
    F = space.displacement_gradient(a, pts)
    F[:, 0, 0] += 1.0
    F[:, 1, 1] += 1.0
    det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    if not with_grad:
        return det
    Bg = space.basis_gradients(pts)  # (M, n, 2, 2)
    ddet = (
        F[None, :, 1, 1] * Bg[:, :, 0, 0]
        + F[None, :, 0, 0] * Bg[:, :, 1, 1]
        - F[None, :, 1, 0] * Bg[:, :, 0, 1]
        - F[None, :, 0, 1] * Bg[:, :, 1, 0]
    )
    return det, ddet


def bijectivity_constraint(space, a, cfg=BijectivityConfig(), with_grad=False):
    """Soft lower/upper Jacobian-band constraint; feasible iff <= 0."""
    pts, w = _constraint_grid(cfg.grid_n)
    if with_grad:
        g, dg = jacobian_determinant(space, a, pts, with_grad=True)
    else:
        g = jacobian_determinant(space, a, pts)
    lo, dlo = _safe_exp((cfg.eps - g) / cfg.c_exp)
    hi, dhi = _safe_exp((g - 1.0 / cfg.eps) / cfg.c_exp)
    val = float(w @ (lo + hi) - cfg.delta)
    if not with_grad:
        return val
    coef = w * (dhi - dlo) / cfg.c_exp
    return val, dg @ coef


class SpectralMap:
    """Parametric domain map: centroid-patch pullback, polynomial
    displacement in the unit square, target-patch pushforward."""

    def __init__(self, space, a, mu):
        self.space = space
        self.a = np.asarray(a, float)
        self.mu = mu if isinstance(mu, ParameterVector) else ParameterVector(*np.asarray(mu, float))
        self.curves = bump_channel_curves(self.mu.alpha)
        self.ref_curves = bump_channel_curves(PARAM_CENTROID[0])

    def pullback(self, x):
        return invert_gordon_hall(self.ref_curves, x)

    def displace(self, xhat):
        """Unit-square displacement step, id + phi."""
        return xhat + self.space.displacement(self.a, xhat)

    def eval_ref(self, xhat):
        """Map unit-square points to the target domain."""
        return gordon_hall(self.curves, self.displace(xhat))

    def __call__(self, x):
        return self.eval_ref(self.pullback(x))

    def jacobian(self, x):
        xhat = self.pullback(x)
        Jref = gordon_hall_jacobian(self.ref_curves, xhat)
        Fint = self.space.displacement_gradient(self.a, xhat)
        Fint[:, 0, 0] += 1.0
        Fint[:, 1, 1] += 1.0
        Jout = gordon_hall_jacobian(self.curves, self.displace(xhat))
        return Jout @ Fint @ np.linalg.inv(Jref)
