"""Projection-based reduced-order model with elementwise empirical
quadrature.

The trial basis is orthonormal in the reference-mesh discrete L2 inner
product and the test basis in the reference broken-H1 product; both Gram
operators are block-diagonal per element, so norms, Riesz representers and
the dual residual reduce to small dense solves. The online solver is
Gauss-Newton with backtracking on the weighted (hyper-reduced) residual
projected onto the test basis.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .euler import EulerOperator, GasModel, SolverConfig, freestream_state, solve_steady
from .geometry import GeometricMap, ParameterVector
from .mesh import ElementGeometry, gram_blocks
from .nnls import nnls
from .rbf import NearestNeighborRegressor, RBFRegressor

__all__ = [
    "BlockGram",
    "pod_cardinality",
    "pod_fields",
    "gram_schmidt_update",
    "build_test_rob",
    "EQRule",
    "EQError",
    "build_eq",
    "solve_lspg",
    "LineSearchError",
    "dual_residual_factors",
    "dual_residual",
    "ReducedModel",
    "weak_greedy",
    "average_error",
]


class BlockGram:
    """Block-diagonal Gram operator of a broken inner product."""

    def __init__(self, mesh, kind, geom=None):
        self.mesh = mesh
        self.kind = kind
        geom = geom or ElementGeometry(mesh)
        self.blocks = gram_blocks(geom, kind)
        self._inv = None

    def _shape(self, v):
        ne, n_lp = self.mesh.n_elements, self.mesh.ref.n_lp
        return np.asarray(v, float).reshape(-1, ne, n_lp).transpose(1, 2, 0)

    def dot(self, u, v):
        ua, va = self._shape(u), self._shape(v)
        return float(np.einsum("eid,eij,ejd->", ua, self.blocks, va))

    def norm(self, u):
        return float(np.sqrt(max(self.dot(u, u), 0.0)))

    def apply(self, u):
        ua = self._shape(u)
        out = np.einsum("eij,ejd->eid", self.blocks, ua)
        return out.transpose(2, 0, 1).reshape(-1)

    def solve(self, u):
        if self._inv is None:
            self._inv = np.linalg.inv(self.blocks)
        ua = self._shape(u)
        out = np.einsum("eij,ejd->eid", self._inv, ua)
        return out.transpose(2, 0, 1).reshape(-1)

    def gram(self, S):
        """Gram matrix of the columns of S."""
        ne, n_lp = self.mesh.n_elements, self.mesh.ref.n_lp
        Sr = S.T.reshape(S.shape[1], -1, ne, n_lp).transpose(0, 2, 3, 1)
        T = np.einsum("eij,nejd->neid", self.blocks, Sr, optimize=True)
        return np.einsum("meid,neid->mn", Sr, T, optimize=True)


def pod_cardinality(lam, tol):
    """Energy criterion: smallest M with leading energy >= (1 - tol)."""
    total = lam.sum()
    if total <= 0.0:
        return 0
    return int(np.searchsorted(np.cumsum(lam), (1.0 - tol) * total) + 1)


def _pod(vectors, X, tol=None, count=None):
    S = np.column_stack(vectors)
    G = X.gram(S)
    lam, V = np.linalg.eigh(G)
    lam, V = np.maximum(lam[::-1], 0.0), V[:, ::-1]
    if count is not None:
        M = min(count, n)
    else:
        M = pod_cardinality(lam, tol)
    keep = lam[:M] > 1e-14 * lam[0] if lam.size and lam[0] > 0 else np.zeros(M, bool)
    M = int(keep.sum())
    modes = S @ (V[:, :M] / np.sqrt(lam[:M]))
    return modes, lam


def pod_fields(snapshots, X, tol=None, count=None):
    """Method-of-snapshots POD; columns orthonormal in `X`."""
    if tol is None and count is None:
        raise ValueError("give a tolerance or a mode count")
    modes, _ = _pod(snapshots, X, tol, count)
    return modes


def gram_schmidt_update(Z, vec, X, tol=1e-12):
    """Append one vector to an X-orthonormal basis (two-pass MGS)."""
    v = np.asarray(vec, float).copy()
    for _ in range(2):
        if Z.shape[1]:
            v -= Z @ (Z.T @ X.apply(v))
    nrm = X.norm(v)
    if nrm < tol:
        return Z
    return np.column_stack([Z, v / nrm])


def build_test_rob(jac_list, Z, Xtest, tol_test=1e-3):
    """Test basis from Riesz representers of residual derivatives.

    `jac_list` holds the hf Jacobians at the training solutions; every
    trial column is pushed through each Jacobian and Riesz-lifted in the
    test inner product, then compressed by POD at `tol_test`. At least as
    many test modes as trial modes are retained.
    """
    reps = []
    for J in jac_list:
        for n in range(Z.shape[1]):
            reps.append(Xtest.solve(J @ Z[:, n]))
    N = Z.shape[1]
    modes, lam = _pod(reps, Xtest, tol=tol_test)
    if modes.shape[1] < N:
        modes, _ = _pod(reps, Xtest, count=N)
    return modes


@dataclass
class EQRule:
    weights: np.ndarray
    residual: float
    target: float

    @property
    def indices(self):
        return np.where(self.weights > 0.0)[0]

    @property
    def sample_count(self):
        return int((self.weights > 0.0).sum())


class EQError(RuntimeError):
    pass


def build_eq(G_blocks, b_blocks, areas, tol_eq):
    """Empirical-quadrature weights by early-terminated NNLS.

    `G_blocks`/`b_blocks` hold one (J_es, N_e) matrix and (J_es,) vector
    per training parameter; each block is normalized by its right-hand
    norm so the tolerance is dimensionless. A constant-function row keeps
    the weighted element areas summing to the domain area.
    """
    rows = [np.asarray(areas, float)[None, :] / areas.sum()]
    rhs = [np.ones(1)]
    for Gb, bb in zip(G_blocks, b_blocks):
        s = np.linalg.norm(bb)
        if s <= 0.0:
            continue
        rows.append(Gb / s)
        rhs.append(bb / s)
    G = np.vstack(rows)
    b = np.concatenate(rhs)
    rho, resid = nnls(G, b, tol=tol_eq)
    target = tol_eq * float(np.linalg.norm(b))
    if resid > target:
        raise EQError(
            f"NNLS reached residual {resid:.3e} above target {target:.3e}"
        )
    rho[rho < 0.0] = 0.0
    return EQRule(rho, resid, target)


class LineSearchError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def solve_lspg(op, Z, Y, weights=None, alpha0=None, maxiter=50,
               step_tol=1e-10, resid_drop=1e-12):
    """Gauss-Newton minimization of the test-projected weighted residual."""
    N = Z.shape[1]
    alpha = np.zeros(N) if alpha0 is None else np.asarray(alpha0, float).copy()
    mesh = op.mesh

    def unflatten(vec):
        return vec.reshape(4, mesh.n_elements, -1).transpose(1, 2, 0)

    def resvec(a):
        U = unflatten(Z @ a)
        return Y.T @ op.residual(U, weights)

    r = resvec(alpha)
    rnorm = float(np.linalg.norm(r))
    r0 = rnorm
    trace = [rnorm]
    for it in range(maxiter):
        if rnorm <= resid_drop * r0:
            break
        U = unflatten(Z @ alpha)
        Jw = op.jacobian(U, weights)
        Jr = Y.T @ (Jw @ Z)
        step = np.linalg.lstsq(Jr, -r, rcond=None)[0]
        t = 1.0
        while True:
            cand = alpha + t * step
            try:
                rc = resvec(cand)
                cnorm = float(np.linalg.norm(rc))
            except Exception:
                cnorm = np.inf
            if np.isfinite(cnorm) and cnorm <= rnorm:
                break
            t *= 0.5
            if t < 1e-8:
                raise LineSearchError("Gauss-Newton line search failed", trace)
        alpha, r, rnorm = cand, rc, cnorm
        trace.append(rnorm)
        if t * float(np.linalg.norm(step)) < step_tol:
            break
    return alpha, {"trace": trace, "iterations": it + 1, "residual": rnorm}


def dual_residual_factors(Xtest):
    """Cache the test-Gram factorization used by the dual residual."""
    return np.linalg.cholesky(Xtest.blocks)


def dual_residual(Rvec, Xtest, chol=None):
    """Test-dual norm sqrt(R^T Ytest^{-1} R) via per-element solves."""
    ch = chol if chol is not None else dual_residual_factors(Xtest)
    ne, n_lp = Xtest.mesh.n_elements, Xtest.mesh.ref.n_lp
    R = np.asarray(Rvec, float).reshape(-1, ne, n_lp).transpose(1, 2, 0)
    z = np.linalg.solve(ch, R)
    return float(np.sqrt((z**2).sum()))


# ---------------------------------------------------------------------------
# deployed reduced model
# ---------------------------------------------------------------------------

@dataclass
class ReducedModel:
    """Everything needed to evaluate the ROM at a new parameter."""

    mesh: object
    ref_coords: np.ndarray          # unit-square coordinates of mesh nodes
    map_model: object               # ParametricMapModel or None (geometric)
    Z: np.ndarray
    Y: np.ndarray
    eq: EQRule
    train_mus: np.ndarray
    train_alphas: np.ndarray
    gas: GasModel = field(default_factory=GasModel)
    solver: SolverConfig = field(default_factory=SolverConfig)
    rbf_threshold: int = 9

    def __post_init__(self):
        self._ops = {}
        self._init = None

    @property
    def n_modes(self):
        return self.Z.shape[1]

    def deform(self, mu):
        mu = _as_param(mu)
        if self.map_model is None:
            from .geometry import bump_channel_curves, gordon_hall

            return gordon_hall(bump_channel_curves(mu.alpha), self.ref_coords)
        return self.map_model.deform_nodes(mu, self.ref_coords)

    def operator_for(self, mu):
        mu = _as_param(mu)
        key = (round(mu.alpha, 14), round(mu.mach, 14))
        if key not in self._ops:
            op = EulerOperator(self.mesh, self.deform(mu), self.gas, self.solver)
            op.set_freestream(mu.mach)
            self._ops[key] = op
        return self._ops[key]

    def init_alpha(self, mu):
        mu = _as_param(mu)
        if self._init is None:
            if len(self.train_mus) >= self.rbf_threshold:
                rbfs = [
                    RBFRegressor(self.train_mus, self.train_alphas[:, n])
                    for n in range(self.n_modes)
                ]
                self._init = lambda m: np.array([r(m[None, :])[0] for r in rbfs])
            else:
                nn = NearestNeighborRegressor(self.train_mus, self.train_alphas)
                self._init = lambda m: nn(m[None, :])[0]
        return self._init(mu.as_array())

    def solve(self, mu, weights="eq", alpha0=None):
        op = self.operator_for(mu)
        w = self.eq.weights if weights == "eq" else weights
        a0 = self.init_alpha(mu) if alpha0 is None else alpha0
        return solve_lspg(op, self.Z, self.Y, w, a0)


def _as_param(mu):
    if isinstance(mu, ParameterVector):
        return mu
    mu = np.asarray(mu, float)
    return ParameterVector(float(mu[0]), float(mu[1]), extrapolation=True)


def evaluate_online(model, mu, reference=None, weights="eq"):
    """Deploy the ROM at one parameter.

    Returns a dict with the deformed node coordinates, the reduced state
    (element-nodal array), the wall time, an in-range flag, and, when a
    reference state on the same deformed mesh is given, the relative L2
    error measured with the deformed-mesh quadrature. A failed bijectivity
    check of the deformed mesh is reported, not raised.
    """
    from .geometry import PARAM_BOUNDS
    from .mesh import bijectivity_check

    mu = _as_param(mu)
    lo, hi = PARAM_BOUNDS[:, 0], PARAM_BOUNDS[:, 1]
    inside = bool(
        lo[0] <= mu.alpha <= hi[0] and lo[1] <= mu.mach <= hi[1]
    )
    t0 = time.perf_counter()
    coords = model.deform(mu)
    ok, bad = bijectivity_check(model.mesh, coords)
    result = {
        "mu": mu.as_array(),
        "coords": coords,
        "bijective": ok,
        "extrapolation": not inside,
        "inverted_elements": bad,
    }
    if not ok:
        result["error"] = np.nan
        result["wall_time"] = time.perf_counter() - t0
        return result
    alpha, info = model.solve(mu, weights=weights)
    U = (model.Z @ alpha).reshape(4, model.mesh.n_elements, -1).transpose(1, 2, 0)
    result["alpha"] = alpha
    result["state"] = U
    result["solver"] = info
    result["wall_time"] = time.perf_counter() - t0
    if reference is not None:
        Xdef = BlockGram(model.mesh, "L2", ElementGeometry(model.mesh, coords))
        dv = (U - reference).transpose(2, 0, 1).reshape(-1)
        rv = np.asarray(reference).transpose(2, 0, 1).reshape(-1)
        result["error"] = Xdef.norm(dv) / Xdef.norm(rv)
    return result


def average_error(errors):
    return float(np.mean(errors))


# ---------------------------------------------------------------------------
# weak-greedy training
# ---------------------------------------------------------------------------

def weak_greedy(train_mus, hf_solve, mesh, ref_coords, map_model, n_max,
                tol_eq=1e-10, tol_test=1e-3, n_seed=0, seed=0,
                gas=None, solver=None, log=None, indicator_tol=0.0):
    """Residual-indicator-driven snapshot selection (offline stage).

    `hf_solve(mu)` returns the hf state array on the deformed mesh of mu.
    Seeding: the centroid-closest training point, optionally preceded by
    `n_seed` spread samples (corners). Returns the final ReducedModel and
    a per-iteration record list.
    """
    gas = gas or GasModel()
    solver = solver or SolverConfig()
    train_mus = np.atleast_2d(np.asarray(train_mus, float))
    n_train = len(train_mus)
    rng = np.random.default_rng(seed)
    X = BlockGram(mesh, "L2")
    Xtest = BlockGram(mesh, "H1")
    chol = dual_residual_factors(Xtest)

    from .geometry import PARAM_BOUNDS, PARAM_CENTROID

    order = []
    if n_seed > 0:
        lo, hi = PARAM_BOUNDS[:, 0], PARAM_BOUNDS[:, 1]
        corners = np.array(
            [[lo[0], lo[1]], [hi[0], lo[1]], [lo[0], hi[1]], [hi[0], hi[1]]]
        )[:n_seed]
        for c in corners:
            order.append(int(np.argmin(np.linalg.norm(train_mus - c, axis=1))))
    k0 = int(np.argmin(np.linalg.norm(train_mus - PARAM_CENTROID, axis=1)))
    if k0 not in order:
        order.insert(0, k0)
    order = list(dict.fromkeys(order))

    # random EQ augmentation parameters (uniform over the training box)
    lo, hi = PARAM_BOUNDS[:, 0], PARAM_BOUNDS[:, 1]
    aug_mus = lo + (hi - lo) * rng.random((10, 2))

    sampled = []
    snaps = {}
    Z = np.zeros((mesh.n_elements * mesh.ref.n_lp * 4, 0))
    jacs = {}
    model = None
    record = []
    areas = ElementGeometry(mesh).areas

    def make_op(mu):
        m = _as_param(mu)
        if map_model is None:
            from .geometry import bump_channel_curves, gordon_hall

            coords = gordon_hall(bump_channel_curves(m.alpha), ref_coords)
        else:
            coords = map_model.deform_nodes(m, ref_coords)
        return EulerOperator(mesh, coords, gas, solver).set_freestream(m.mach)

    ops = {}

    def op_for(k_or_mu):
        key = tuple(np.round(np.asarray(k_or_mu, float), 14))
        if key not in ops:
            ops[key] = make_op(k_or_mu)
        return ops[key]

    next_k = order.pop(0)
    for it in range(n_max):
        mu_star = train_mus[next_k]
        if next_k not in snaps:
            U = hf_solve(mu_star)
            snaps[next_k] = U
            sampled.append(next_k)
            vec = U.transpose(2, 0, 1).reshape(-1)
            Z = gram_schmidt_update(Z, vec, X)
            jacs[next_k] = op_for(mu_star).jacobian(U)
        if log:
            log(f"greedy N={Z.shape[1]} sampled mu={np.round(mu_star, 4)}")

        Y = build_test_rob([jacs[k] for k in sampled], Z, Xtest, tol_test)
        alphas = {}
        for k in sampled:
            vec = snaps[k].transpose(2, 0, 1).reshape(-1)
            alphas[k] = Z.T @ X.apply(vec)
        model = ReducedModel(
            mesh, ref_coords, map_model, Z, Y, EQRule(np.ones(mesh.n_elements), 0, 0),
            np.array([train_mus[k] for k in sampled]),
            np.array([alphas[k] for k in sampled]),
            gas, solver,
        )
        model._ops = ops
        Gb, bb = [], []
        for k in sampled:
            op = op_for(train_mus[k])
            Ur = (Z @ alphas[k]).reshape(4, mesh.n_elements, -1).transpose(1, 2, 0)
            g = op.eq_rows(Ur, Y)
            Gb.append(g)
            bb.append(g.sum(axis=1))
        for mu in aug_mus:
            op = op_for(mu)
            a_full, _ = solve_lspg(op, Z, Y, None, model.init_alpha(_as_param(mu)))
            Ur = (Z @ a_full).reshape(4, mesh.n_elements, -1).transpose(1, 2, 0)
            g = op.eq_rows(Ur, Y)
            Gb.append(g)
            bb.append(g.sum(axis=1))
        eq = build_eq(Gb, bb, areas, tol_eq)
        model.eq = eq

        indicators = np.zeros(n_train)
        for k in range(n_train):
            try:
                a_hat, _ = model.solve(train_mus[k])
            except LineSearchError:
                indicators[k] = np.inf
                continue
            op = op_for(train_mus[k])
            Ur = (Z @ a_hat).reshape(4, mesh.n_elements, -1).transpose(1, 2, 0)
            R = op.residual(Ur)
            indicators[k] = dual_residual(R, Xtest, chol)
        record.append(
            {
                "N": Z.shape[1],
                "sampled": list(sampled),
                "indicators": indicators.copy(),
                "Q": eq.sample_count,
                "J_es": Y.shape[1],
            }
        )
        if log:
            log(
                f"  N={Z.shape[1]} J_es={Y.shape[1]} Q={eq.sample_count} "
                f"max_ind={indicators.max():.3e}"
            )
        if it == n_max - 1:
            break
        if order:
            next_k = order.pop(0)
        else:
            masked = indicators.copy()
            masked[sampled] = -np.inf
            if masked.max() <= indicator_tol:
                break
            next_k = int(masked.argmax())
    return model, record
