"""Registration sensors: smoothed scalar fields on a structured grid over
the unit square.

A sensor is built from the Mach number of a (coarse) flow solution by a
gradient-penalized least-squares fit on a bilinear tensor grid; the fit
decouples the sensor resolution from the flow mesh and yields a field
smooth enough for gradient-based registration. Queries outside the unit
square are clamped to it.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .euler import GasModel, primitives

__all__ = ["GridField", "grid_quadrature", "mach_at_nodes", "build_sensor"]


class GridField:
    """Bilinear field on an n-by-n tensor grid over the unit square."""

    def __init__(self, values):
        values = np.asarray(values, float)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError("grid values must be square")
        if not np.isfinite(values).all():
            raise ValueError("grid values must be finite")
        self.values = values
        self.n = values.shape[0]
        self.h = 1.0 / (self.n - 1)

    def _locate(self, pts):
        pts = np.atleast_2d(np.asarray(pts, float))
        x = np.clip(pts[:, 0], 0.0, 1.0)
        y = np.clip(pts[:, 1], 0.0, 1.0)
        i = np.minimum((x / self.h).astype(int), self.n - 2)
        j = np.minimum((y / self.h).astype(int), self.n - 2)
        tx = x / self.h - i
        ty = y / self.h - j
        return i, j, tx, ty

    def __call__(self, pts):
        i, j, tx, ty = self._locate(pts)
        v = self.values
        return (
            v[i, j] * (1 - tx) * (1 - ty)
            + v[i + 1, j] * tx * (1 - ty)
            + v[i, j + 1] * (1 - tx) * ty
            + v[i + 1, j + 1] * tx * ty
        )

    def gradient(self, pts):
        i, j, tx, ty = self._locate(pts)
        v = self.values
        gx = (
            (v[i + 1, j] - v[i, j]) * (1 - ty) + (v[i + 1, j + 1] - v[i, j + 1]) * ty
        ) / self.h
        gy = (
            (v[i, j + 1] - v[i, j]) * (1 - tx) + (v[i + 1, j + 1] - v[i + 1, j]) * tx
        ) / self.h
        return np.stack([gx, gy], axis=-1)


def grid_quadrature(n):
    """Trapezoidal nodes/weights on the n-by-n unit-square grid.

    Returns ``(points (n*n, 2), weights (n*n,))`` in the row-major order of
    the grid values array (x index fastest over rows).
    """
    x = np.linspace(0.0, 1.0, n)
    w1 = np.full(n, 1.0 / (n - 1))
    w1[[0, -1]] *= 0.5
    X, Y = np.meshgrid(x, x, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel()]), np.outer(w1, w1).ravel()


def _grid_operators(n):
    h = 1.0 / (n - 1)
    main = np.full(n, 2.0 / h)
    main[[0, -1]] = 1.0 / h
    K1 = sp.diags([main, -np.full(n - 1, 1.0 / h), -np.full(n - 1, 1.0 / h)], [0, 1, -1])
    mmain = np.full(n, 4.0 * h / 6.0)
    mmain[[0, -1]] = 2.0 * h / 6.0
    M1 = sp.diags([mmain, np.full(n - 1, h / 6.0), np.full(n - 1, h / 6.0)], [0, 1, -1])
    # tensor bilinear FE: stiffness = Kx (x) My + Mx (x) Ky (x index major)
    return sp.kron(K1, M1) + sp.kron(M1, K1)


def _interp_matrix(n, pts):
    pts = np.atleast_2d(np.asarray(pts, float))
    h = 1.0 / (n - 1)
    x = np.clip(pts[:, 0], 0.0, 1.0)
    y = np.clip(pts[:, 1], 0.0, 1.0)
    i = np.minimum((x / h).astype(int), n - 2)
    j = np.minimum((y / h).astype(int), n - 2)
    tx = x / h - i
    ty = y / h - j
    rows = np.repeat(np.arange(len(pts)), 4)
    cols = np.stack(
        [i * n + j, (i + 1) * n + j, i * n + j + 1, (i + 1) * n + j + 1], axis=1
    ).ravel()
    vals = np.stack(
        [(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty], axis=1
    ).ravel()
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(pts), n * n))


def mach_at_nodes(mesh, U, gas=GasModel()):
    """Mach number at mesh nodes, averaging coincident element values."""
    _, _, Ma = primitives(U, gas)
    acc = np.zeros(mesh.n_vertices)
    cnt = np.zeros(mesh.n_vertices)
    np.add.at(acc, mesh.conn, Ma)
    np.add.at(cnt, mesh.conn, 1.0)
    return acc / cnt


def build_sensor(ref_points, data, n=128, xi_s=1e-4):
    """Gradient-penalized least-squares fit of scattered unit-square data.

    Minimizes ``xi_s * |grad s|^2 + sum_j (s(x_j) - data_j)^2`` over the
    bilinear grid space; the system is symmetric positive definite for any
    positive penalty.
    """
    if xi_s <= 0.0:
        raise ValueError("smoothing weight must be positive")
    K = _grid_operators(n)
    A = _interp_matrix(n, ref_points)
    lhs = (xi_s * K + A.T @ A).tocsc()
    rhs = A.T @ np.asarray(data, float)
    s = spla.splu(lhs).solve(rhs)
    return GridField(s.reshape(n, n))
