"""Sensor registration: constrained mapping optimization and the greedy
template algorithm.

For one parameter, registration minimizes the projection error of the
deformed sensor onto a template space, plus a displacement-norm
regularizer and a mesh-distortion penalty, subject to the soft Jacobian
bijectivity constraint. The constraint is handled by quadratic-penalty
continuation around a backtracking quasi-Newton (L-BFGS) inner solver with
analytic gradients throughout.

The greedy driver alternates register-all / coefficient-POD / enrich-worst
until the worst proximity drops below tolerance or the template budget is
reached; retained mapping modes are generalized over the parameter domain
by RBF regression with a leave-one-out R-squared gate.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .geometry import (
    PARAM_CENTROID,
    ParameterVector,
    bump_channel_curves,
    gordon_hall,
    gordon_hall_jacobian,
    invert_gordon_hall,
)
from .mapspace import (
    BijectivityConfig,
    MappingSpace,
    SpectralMap,
    _constraint_grid,
    _leg_tables,
    _safe_exp,
    bijectivity_constraint,
    full_mapping_space,
)
from .mesh import bijectivity_check
from .rbf import RBFRegressor, loo_r_squared
from .sensors import GridField, grid_quadrature

__all__ = [
    "RegistrationConfig",
    "RegistrationError",
    "TemplateSpace",
    "MeshDistortion",
    "proximity_measure",
    "register_one",
    "greedy_registration",
    "pod_coefficients",
    "fit_map_regressors",
    "ParametricMapModel",
]


class RegistrationError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class RegistrationConfig:
    xi: float = 1e-3
    xi_msh: float = 1e-6
    eps: float = 0.1
    c_exp: float = 0.0025  # 0.025 * eps
    delta: float = 1.0
    f_msh_max: float = 10.0
    n_max: int = 5
    tol_pod: float = 1e-3
    tol: float = 1e-4
    J: int = 15
    r_min: float = 0.75
    xi_s: float = 1e-4
    sensor_n: int = 128
    constraint_grid: int = 32
    constraint_tol: float = 1e-8
    penalty0: float = 10.0
    penalty_growth: float = 10.0
    penalty_loops: int = 5
    opt_maxiter: int = 400

    def bijectivity(self):
        return BijectivityConfig(self.eps, self.c_exp, self.delta, self.constraint_grid)


# ---------------------------------------------------------------------------
# template space on the sensor grid
# ---------------------------------------------------------------------------

class TemplateSpace:
    """Orthonormal template fields sampled on the sensor quadrature grid."""

    def __init__(self, n):
        self.n = n
        self.qpts, self.qw = grid_quadrature(n)
        self.rows = np.zeros((0, n * n))

    @property
    def dim(self):
        return self.rows.shape[0]

    def dot(self, f, g):
        return float((self.qw * f * g).sum())

    def gram(self):
        return (self.rows * self.qw) @ self.rows.T

    def append(self, values, tol=1e-10):
        """Gram-Schmidt a new field in; returns False if linearly dependent."""
        v = np.asarray(values, float).reshape(-1)
        for _ in range(2):
            v = v - self.rows.T @ ((self.rows * self.qw) @ v)
        nrm = np.sqrt(self.dot(v, v))
        if nrm < tol:
            return False
        self.rows = np.vstack([self.rows, v / nrm])
        return True

    def project_coeffs(self, values):
        return (self.rows * self.qw) @ np.asarray(values, float).reshape(-1)

    def fields(self):
        return [GridField(r.reshape(self.n, self.n)) for r in self.rows]


# ---------------------------------------------------------------------------
# objective pieces
# ---------------------------------------------------------------------------

class _GridEval:
    """Fast displacement evaluation of one mapping space on the tensor grid."""

    def __init__(self, space, n):
        self.space = space
        x = np.linspace(0.0, 1.0, n)
        self.X0 = _leg_tables(x, space.J)[0]
        qpts, self.qw = grid_quadrature(n)
        self.qpts = qpts
        # mode values on the grid, (M, n*n, 2)
        T = np.tensordot(space.modes, self.X0, axes=([3], [1]))  # (M,2,A,y)
        B = np.einsum("xa,mcay->mxyc", self.X0, T, optimize=True)
        self.basis = B.reshape(space.dim, n * n, 2)

    def displacement(self, a):
        C = self.space.combine(a)
        d1 = self.X0 @ C[0] @ self.X0.T
        d2 = self.X0 @ C[1] @ self.X0.T
        return np.stack([d1.ravel(), d2.ravel()], axis=-1)


def proximity_measure(a, sensor, templates, grid_eval, with_grad=False):
    """Projection error of the deformed sensor onto the template space."""
    pts = grid_eval.qpts + grid_eval.displacement(a)
    sv = sensor(pts)
    w = grid_eval.qw
    coeff = (templates.rows * w) @ sv if templates.dim else np.zeros(0)
    r = sv - (templates.rows.T @ coeff if templates.dim else 0.0)
    f = float((w * r * r).sum())
    if not with_grad:
        return f
    g = sensor.gradient(pts)
    wr = 2.0 * w * r
    grad = grid_eval.basis[:, :, 0] @ (wr * g[:, 0]) + grid_eval.basis[:, :, 1] @ (
        wr * g[:, 1]
    )
    return f, grad


class MeshDistortion:
    """Distortion penalty of the mapped mesh, on p=1 corner sub-triangles.

    The deformation gradient is taken relative to the undeformed element, so
    the identity map scores one on every element.
    """

    def __init__(self, mesh, space, cfg, cap=1e30):
        self.cfg = cfg
        self.cap = cap
        corners = mesh.conn[:, mesh.ref.corner_ids]
        vids, self.tris = np.unique(corners, return_inverse=True)
        self.tris = self.tris.reshape(-1, 3)
        self.xv = mesh.vertices[vids]
        ref_curves = bump_channel_curves(PARAM_CENTROID[0])
        self.xhat = invert_gordon_hall(ref_curves, self.xv)
        e1 = self.xv[self.tris[:, 1]] - self.xv[self.tris[:, 0]]
        e2 = self.xv[self.tris[:, 2]] - self.xv[self.tris[:, 0]]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        self.areas = 0.5 * np.abs(det)
        Xinv = np.empty((len(det), 2, 2))
        Xinv[:, 0, 0] = e2[:, 1]
        Xinv[:, 1, 1] = e1[:, 0]
        Xinv[:, 0, 1] = -e2[:, 0]
        Xinv[:, 1, 0] = -e1[:, 1]
        self.Xinv = Xinv / det[:, None, None]
        self.basis = space.basis_values(self.xhat)  # (M, nv, 2)
        self.space = space

    def __call__(self, a, mu, with_grad=False):
        cfg = self.cfg
        curves = bump_channel_curves(mu.alpha if isinstance(mu, ParameterVector) else mu[0])
        zhat = self.xhat + self.space.displacement(a, self.xhat)
        y = gordon_hall(curves, zhat)
        e1 = y[self.tris[:, 1]] - y[self.tris[:, 0]]
        e2 = y[self.tris[:, 2]] - y[self.tris[:, 0]]
        Y = np.stack([e1, e2], axis=-1)
        F = Y @ self.Xinv
        det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
        if np.abs(det).min() < 1e-14:
            if with_grad:
                return self.cap, np.zeros(self.space.dim)
            return self.cap
        fro2 = (F**2).sum(axis=(1, 2))
        fmsh = 0.5 * fro2 / np.abs(det)
        z = np.minimum(fmsh - cfg.f_msh_max, 600.0)
        expz = np.exp(z)
        val = float((self.areas * expz).sum())
        if not with_grad:
            return val
        # d fmsh / dF = F/|det| - (fmsh/det) * cof(F)  with cof from d det/dF
        cof = np.empty_like(F)
        cof[:, 0, 0] = F[:, 1, 1]
        cof[:, 1, 1] = F[:, 0, 0]
        cof[:, 0, 1] = -F[:, 1, 0]
        cof[:, 1, 0] = -F[:, 0, 1]
        dfdF = F / np.abs(det)[:, None, None] - (fmsh / det)[:, None, None] * cof
        w = np.where(z < 600.0, self.areas * expz, self.areas * np.exp(600.0))
        G = w[:, None, None] * np.einsum("kab,kcb->kac", dfdF, self.Xinv)
        gy = np.zeros_like(y)
        np.add.at(gy, self.tris[:, 1], G[:, :, 0])
        np.add.at(gy, self.tris[:, 2], G[:, :, 1])
        np.add.at(gy, self.tris[:, 0], -G[:, :, 0] - G[:, :, 1])
        Jgh = gordon_hall_jacobian(curves, zhat)
        gz = np.einsum("vab,va->vb", Jgh, gy)
        grad = np.einsum("mvc,vc->m", self.basis, gz)
        return val, grad


# ---------------------------------------------------------------------------
# single registration solve
# ---------------------------------------------------------------------------

def register_one(sensor, templates, space, distortion, mu, cfg, a0=None,
                 grid_eval=None, con_basis=None):
    """Solve the constrained registration problem for one parameter.

    Returns ``(a_star, f_star, info)``; raises RegistrationError when the
    bijectivity constraint is violated at the solution.
    """
    mu = mu if isinstance(mu, ParameterVector) else ParameterVector(*np.asarray(mu, float))
    ge = grid_eval or _GridEval(space, sensor.n)
    bj = cfg.bijectivity()
    a0 = np.zeros(space.dim) if a0 is None else np.asarray(a0, float)

    def pieces(a):
        f, gf = proximity_measure(a, sensor, templates, ge, with_grad=True)
        r, gr = distortion(a, mu, with_grad=True)
        c, gc = _constraint_value(space, a, bj, con_basis)
        return f, gf, r, gr, c, gc

    history = []

    def objective(a, pen):
        f, gf, r, gr, c, gc = pieces(a)
        val = f + cfg.xi * (a @ a) + cfg.xi_msh * r
        grad = gf + 2.0 * cfg.xi * a + cfg.xi_msh * gr
        if c > 0.0:
            val += pen * c * c
            grad = grad + 2.0 * pen * c * gc
        return val, grad

    a = a0.copy()
    pen = cfg.penalty0
    for _ in range(cfg.penalty_loops):
        res = minimize(
            objective,
            a,
            args=(pen,),
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": cfg.opt_maxiter, "ftol": 1e-14, "gtol": 1e-10},
        )
        a = res.x
        c = _constraint_value(space, a, bj, con_basis)[0]
        history.append((res.fun, c))
        if c <= cfg.constraint_tol:
            break
        pen *= cfg.penalty_growth
    if c > cfg.constraint_tol:
        raise RegistrationError(
            f"bijectivity constraint violated at optimum (C = {c:.3e})",
            {"mu": mu, "history": history},
        )
    fstar = proximity_measure(a, sensor, templates, ge)
    return a, fstar, {"constraint": c, "history": history, "nit": res.nit}


def _constraint_value(space, a, bj, con_basis=None):
    if con_basis is None:
        return bijectivity_constraint(space, a, bj, with_grad=True)
    # cached basis gradients on the constraint grid
    pts, w, Bg = con_basis
    F = space.displacement_gradient(a, pts)
    F[:, 0, 0] += 1.0
    F[:, 1, 1] += 1.0
    g = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    lo, dlo = _safe_exp((bj.eps - g) / bj.c_exp)
    hi, dhi = _safe_exp((g - 1.0 / bj.eps) / bj.c_exp)
    val = float(w @ (lo + hi) - bj.delta)
    dg = (
        F[None, :, 1, 1] * Bg[:, :, 0, 0]
        + F[None, :, 0, 0] * Bg[:, :, 1, 1]
        - F[None, :, 1, 0] * Bg[:, :, 0, 1]
        - F[None, :, 0, 1] * Bg[:, :, 1, 0]
    )
    coef = w * (dhi - dlo) / bj.c_exp
    return val, dg @ coef


# ---------------------------------------------------------------------------
# POD of mapping coefficients
# ---------------------------------------------------------------------------

def pod_coefficients(samples, tol_pod):
    """Energy-criterion POD of coefficient vectors in an orthonormal basis.

    Returns ``(W, projected)`` with W columns orthonormal; rank-deficient
    directions (eigenvalues below 1e-14 of the largest) are dropped.
    """
    C = np.atleast_2d(np.asarray(samples, float))
    gram = C @ C.T
    lam, V = np.linalg.eigh(gram)
    lam, V = lam[::-1], V[:, ::-1]
    lam = np.maximum(lam, 0.0)
    total = lam.sum()
    if total <= 0.0:
        return np.zeros((C.shape[1], 0)), np.zeros((len(C), 0))
    csum = np.cumsum(lam)
    M = int(np.searchsorted(csum, (1.0 - tol_pod) * total) + 1)
    keep = lam[:M] > 1e-14 * lam[0]
    M = int(keep.sum())
    W = (C.T @ V[:, :M]) / np.sqrt(lam[:M])
    return W, C @ W


# ---------------------------------------------------------------------------
# greedy template construction (register-all / POD / enrich-worst)
# ---------------------------------------------------------------------------

@dataclass
class GreedyRegistrationResult:
    space: MappingSpace          # retained mapping modes (isometry)
    coeffs: np.ndarray           # (n_train, M) projected coefficients
    mus: np.ndarray              # (n_train, 2)
    templates: TemplateSpace
    fstars: np.ndarray
    report: list = field(default_factory=list)

    def max_fstar(self):
        return float(self.fstars.max())


def greedy_registration(sensor_set, mesh, cfg=None, full_space=None, log=None):
    """Template/mapping construction over a training set of sensors.

    `sensor_set` is a list of ``(mu, GridField)`` pairs. The initial
    template is the sensor nearest the parameter-domain centroid. Returns a
    GreedyRegistrationResult; the per-iteration report rows carry
    (iteration, k, mu1, mu2, f_star, constraint, |a|).
    """
    cfg = cfg or RegistrationConfig()
    mus = np.array([np.asarray(m, float)[:2] if not isinstance(m, ParameterVector)
                    else m.as_array() for m, _ in sensor_set])
    sensors = [s for _, s in sensor_set]
    n_train = len(sensors)
    if n_train < 1:
        raise ValueError("at least one training sensor required")

    whf = full_space or full_mapping_space(cfg.J)
    templates = TemplateSpace(cfg.sensor_n)
    k0 = int(np.argmin(np.linalg.norm(mus - PARAM_CENTROID, axis=1)))
    templates.append(sensors[k0].values)

    bj = cfg.bijectivity()
    con_pts, con_w = _constraint_grid(cfg.constraint_grid)

    # Wcur maps current-space coefficients to full-space ones; its columns
    # stay orthonormal, so transposition projects back
    Wcur = np.eye(whf.dim)
    space = whf
    full_coeffs = np.zeros((n_train, whf.dim))
    report = []
    fstars = np.full(n_train, np.inf)
    coeffs = np.zeros((n_train, 0))
    registered = np.zeros(n_train, bool)

    for it in range(cfg.n_max):
        ge = _GridEval(space, cfg.sensor_n)
        con_basis = (con_pts, con_w, space.basis_gradients(con_pts))
        distortion = MeshDistortion(mesh, space, cfg)
        new_full = np.zeros_like(full_coeffs)
        for k in range(n_train):
            if registered.any():
                prev = np.where(registered)[0]
                nearest = prev[np.argmin(np.linalg.norm(mus[prev] - mus[k], axis=1))]
                a0 = Wcur.T @ full_coeffs[nearest]
            else:
                a0 = np.zeros(space.dim)
            a, f, info = register_one(
                sensors[k], templates, space, distortion, mus[k], cfg,
                a0=a0, grid_eval=ge, con_basis=con_basis,
            )
            fstars[k] = f
            new_full[k] = Wcur @ a
            report.append((it, k, mus[k][0], mus[k][1], f, info["constraint"],
                           float(np.linalg.norm(a))))
            if log:
                log(f"greedy pass {it} k={k} f*={f:.3e} C={info['constraint']:.2e}")
        registered[:] = True
        full_coeffs = new_full
        Wcur, coeffs = pod_coefficients(full_coeffs, cfg.tol_pod)
        space = whf.subspace(Wcur)
        full_coeffs = coeffs @ Wcur.T
        if fstars.max() < cfg.tol or it == cfg.n_max - 1:
            break
        kstar = int(np.argmax(fstars))
        ge_new = _GridEval(space, cfg.sensor_n)
        warped = sensors[kstar](ge_new.qpts + ge_new.displacement(coeffs[kstar]))
        if not templates.append(warped):
            break

    return GreedyRegistrationResult(space, coeffs, mus, templates, fstars, report)


# ---------------------------------------------------------------------------
# parametric generalization
# ---------------------------------------------------------------------------

class ParametricMapModel:
    """Mode-wise RBF regression of mapping coefficients with an R^2 gate.

    Rejected modes contribute exactly zero displacement for every
    parameter.
    """

    def __init__(self, space, mus, coeffs, r_min=0.75):
        mus = np.atleast_2d(np.asarray(mus, float))
        coeffs = np.asarray(coeffs, float).reshape(len(mus), -1)
        if len(mus) < 3:
            raise ValueError("at least 3 training pairs required")
        if np.allclose(mus, mus[0]):
            raise RegistrationError("degenerate parameter set for regression")
        self.space = space
        self.mus = mus
        self.coeffs = coeffs
        self.r_min = r_min
        self.r2 = np.array(
            [loo_r_squared(mus, coeffs[:, m]) for m in range(coeffs.shape[1])]
        )
        self.keep = self.r2 >= r_min
        self.rbfs = [
            RBFRegressor(mus, coeffs[:, m]) if self.keep[m] else None
            for m in range(coeffs.shape[1])
        ]

    @property
    def n_modes(self):
        return self.coeffs.shape[1]

    def predict(self, mu):
        mu = np.asarray(mu, float)[:2] if not isinstance(mu, ParameterVector) else mu.as_array()
        a = np.zeros(self.n_modes)
        for m, rbf in enumerate(self.rbfs):
            if rbf is not None:
                a[m] = rbf(mu[None, :])[0]
        return a

    def map_for(self, mu):
        mu = mu if isinstance(mu, ParameterVector) else ParameterVector(
            *np.asarray(mu, float)[:2], extrapolation=True
        )
        return SpectralMap(self.space, self.predict(mu), mu)

    def deform_nodes(self, mu, ref_coords):
        """Deformed node positions from cached unit-square coordinates."""
        return self.map_for(mu).eval_ref(ref_coords)


def fit_map_regressors(mus, coeffs, r_min=0.75, space=None):
    """Convenience wrapper returning a ParametricMapModel."""
    return ParametricMapModel(space, mus, coeffs, r_min)


def check_mapped_mesh(mesh, ref_coords, model, mu):
    """Deform a mesh with a map model and run the bijectivity check."""
    coords = model.deform_nodes(mu, ref_coords)
    return bijectivity_check(mesh, coords)
