"""Nodal DG discretization of the 2D compressible Euler equations.

Conserved variables are U = [rho, rho*u1, rho*u2, E] (nondimensional). The
scheme combines a local Lax-Friedrichs convective flux, dilation-based
piecewise-constant artificial viscosity entering through BR2 diffusion
terms, and ghost-state boundary conditions: full free-stream imposition at
the supersonic inflow, transmissive outflow, slip-mirror walls. No
diffusive facet terms act on the domain boundary (weak homogeneous Neumann
for the artificial-viscosity operator).

The residual is a sum of per-element contributions. Each interior-facet
integral is split half-and-half between the two adjacent elements with the
test function kept two-sided in each half, so a single element's facet term
vanishes identically against globally constant test functions; conservation
then survives arbitrary nonnegative element weights. The weighted assembly
path is the only assembly path, and unit weights reproduce the full
residual bitwise.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import ElementGeometry, FacetGeometry, mass_blocks

__all__ = [
    "GasModel",
    "SolverConfig",
    "StateError",
    "NonConvergenceError",
    "freestream_state",
    "primitives",
    "physical_flux",
    "flux_jacobian_normal",
    "llf_flux",
    "EulerOperator",
    "solve_steady",
]


class StateError(ValueError):
    """Raised for states with nonpositive density or pressure."""


class NonConvergenceError(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class GasModel:
    gamma: float = 1.4

    def __post_init__(self):
        if self.gamma <= 1.0:
            raise ValueError("gamma must exceed 1")


@dataclass
class SolverConfig:
    c_visc: float = 10.0
    br2_eta: float = 3.0
    tol: float = 1e-8
    max_steps: int = 500
    cfl0: float = 0.1
    cfl_growth: float = 2.0
    cfl_cut: float = 0.5
    cfl_max: float = 1e6
    cfl_min: float = 1e-12
    # residual may grow by this factor within an accepted step; strict
    # monotone rejection deadlocks while a detached shock crosses the mesh
    cfl_reject_ratio: float = 2.0

    def __post_init__(self):
        if self.c_visc < 0:
            raise ValueError("c_visc must be nonnegative")


def freestream_state(mach, gas=GasModel()):
    """Free-stream conserved state for an inflow Mach number."""
    g = gas.gamma
    T = 1.0 / (1.0 + 0.5 * (g - 1.0) * mach**2)
    p = T ** (g / (g - 1.0))
    rho = p / T
    u1 = np.sqrt(g * T) * mach
    E = p / (g - 1.0) + 0.5 * rho * u1**2
    return np.array([rho, rho * u1, 0.0, E])


def primitives(U, gas=GasModel(), check=True):
    """Pressure, sound speed and axial Mach number of conserved states."""
    U = np.asarray(U, float)
    rho = U[..., 0]
    if check and (rho <= 0.0).any():
        raise StateError("nonpositive density")
    u = U[..., 1:3] / rho[..., None]
    p = (gas.gamma - 1.0) * (U[..., 3] - 0.5 * rho * (u**2).sum(axis=-1))
    if check and (p <= 0.0).any():
        raise StateError("nonpositive pressure")
    a = np.sqrt(gas.gamma * p / rho)
    return p, a, u[..., 0] / a


def physical_flux(U, gas=GasModel()):
    """Euler flux tensor, shape (..., 4, 2)."""
    U = np.asarray(U, float)
    rho, E = U[..., 0], U[..., 3]
    u = U[..., 1:3] / rho[..., None]
    p = (gas.gamma - 1.0) * (E - 0.5 * rho * (u**2).sum(axis=-1))
    F = np.empty(U.shape[:-1] + (4, 2))
    F[..., 0, :] = U[..., 1:3]
    F[..., 1, :] = U[..., 1, None] * u
    F[..., 2, :] = U[..., 2, None] * u
    F[..., 1, 0] += p
    F[..., 2, 1] += p
    F[..., 3, :] = u * (E + p)[..., None]
    return F


def _pressure_grad(U, gas):
    rho = U[..., 0]
    u = U[..., 1:3] / rho[..., None]
    dp = np.empty_like(U)
    dp[..., 0] = 0.5 * (u**2).sum(axis=-1)
    dp[..., 1] = -u[..., 0]
    dp[..., 2] = -u[..., 1]
    dp[..., 3] = 1.0
    return (gas.gamma - 1.0) * dp


def flux_jacobian_normal(U, n, gas=GasModel()):
    """d(F(U) . n)/dU, shape (..., 4, 4); n broadcasts against U."""
    U = np.asarray(U, float)
    n = np.broadcast_to(np.asarray(n, float), U.shape[:-1] + (2,))
    rho, E = U[..., 0], U[..., 3]
    m = U[..., 1:3]
    u = m / rho[..., None]
    p = (gas.gamma - 1.0) * (E - 0.5 * rho * (u**2).sum(axis=-1))
    q = (u * n).sum(axis=-1)
    dp = _pressure_grad(U, gas)
    dq = np.empty_like(U)
    dq[..., 0] = -q / rho
    dq[..., 1] = n[..., 0] / rho
    dq[..., 2] = n[..., 1] / rho
    dq[..., 3] = 0.0
    A = np.zeros(U.shape[:-1] + (4, 4))
    A[..., 0, 1] = n[..., 0]
    A[..., 0, 2] = n[..., 1]
    for c in (1, 2):
        A[..., c, :] = m[..., c - 1, None] * dq + n[..., c - 1, None] * dp
        A[..., c, c] += q
    A[..., 3, :] = (E + p)[..., None] * dq + q[..., None] * dp
    A[..., 3, 3] += q
    return A


def _wave_speed(U, n, gas):
    """|u.n| + a with its gradient in U."""
    rho = U[..., 0]
    u = U[..., 1:3] / rho[..., None]
    p = (gas.gamma - 1.0) * (U[..., 3] - 0.5 * rho * (u**2).sum(axis=-1))
    a = np.sqrt(gas.gamma * p / rho)
    q = (u * n).sum(axis=-1)
    dp = _pressure_grad(U, gas)
    dq = np.empty_like(U)
    dq[..., 0] = -q / rho
    dq[..., 1] = n[..., 0] / rho
    dq[..., 2] = n[..., 1] / rho
    dq[..., 3] = 0.0
    da = (gas.gamma / (2.0 * a * rho))[..., None] * dp
    da[..., 0] -= gas.gamma * p / (2.0 * a * rho**2)
    return np.abs(q) + a, np.sign(q)[..., None] * dq + da


def llf_flux(UL, UR, n, gas=GasModel(), with_jac=False):
    """Local Lax-Friedrichs flux through normal n (pointing from L to R)."""
    UL, UR = np.asarray(UL, float), np.asarray(UR, float)
    n = np.broadcast_to(np.asarray(n, float), UL.shape[:-1] + (2,))
    FL = np.einsum("...da,...a->...d", physical_flux(UL, gas), n)
    FR = np.einsum("...da,...a->...d", physical_flux(UR, gas), n)
    sL, dsL = _wave_speed(UL, n, gas)
    sR, dsR = _wave_speed(UR, n, gas)
    lam = np.maximum(sL, sR)
    H = 0.5 * (FL + FR) - 0.5 * lam[..., None] * (UR - UL)
    if not with_jac:
        return H
    pickL = (sL >= sR)[..., None]
    dlamL = np.where(pickL, dsL, 0.0)
    dlamR = np.where(pickL, 0.0, dsR)
    eye = np.eye(4)
    dHL = 0.5 * flux_jacobian_normal(UL, n, gas)
    dHL += 0.5 * lam[..., None, None] * eye
    dHL -= 0.5 * np.einsum("...d,...c->...dc", UR - UL, dlamL)
    dHR = 0.5 * flux_jacobian_normal(UR, n, gas)
    dHR -= 0.5 * lam[..., None, None] * eye
    dHR -= 0.5 * np.einsum("...d,...c->...dc", UR - UL, dlamR)
    return H, dHL, dHR


def _mirror_state(U, n):
    """Slip-wall ghost state and its Jacobian in the interior trace."""
    G = U.copy()
    mn = (U[..., 1:3] * n).sum(axis=-1)
    G[..., 1:3] -= 2.0 * mn[..., None] * n
    dG = np.zeros(U.shape + (4,))
    dG[..., 0, 0] = 1.0
    dG[..., 3, 3] = 1.0
    dG[..., 1:3, 1:3] = np.eye(2) - 2.0 * np.einsum("...a,...b->...ab", n, n)
    return G, dG


class EulerOperator:
    """Residual, Jacobian and per-element residual assembly on one mesh.

    `coords` deforms the mesh nodes (same connectivity); states are
    (N_e, n_lp, 4) arrays. Call :meth:`set_freestream` before assembling on
    meshes with inflow facets.
    """

    D = 4

    def __init__(self, mesh, coords=None, gas=GasModel(), config=None):
        self.mesh = mesh
        self.gas = gas
        self.config = config or SolverConfig()
        self.geom = ElementGeometry(mesh, coords)
        if (self.geom.det <= 0.0).any():
            raise ValueError("mesh (or its deformation) has inverted elements")
        self.fgeom = FacetGeometry(mesh, coords)
        self.mblocks = mass_blocks(self.geom)
        self.minv = np.linalg.inv(self.mblocks)
        ref = mesh.ref
        ne, n_lp = mesh.n_elements, ref.n_lp
        self.n_dof = ne * n_lp * self.D
        base = np.arange(n_lp)[:, None] + n_lp * ne * np.arange(self.D)[None, :]
        self.gdof = (n_lp * np.arange(ne))[:, None, None] + base[None, :, :]
        self.h_min = float(np.sqrt(self.geom.areas.min()))
        self._uinf = None

    def set_freestream(self, mach):
        self._uinf = freestream_state(mach, self.gas)
        return self

    # -- state helpers ------------------------------------------------------
    def admissible(self, U):
        rho = U[..., 0]
        if (rho <= 0.0).any():
            return False
        p = (self.gas.gamma - 1.0) * (
            U[..., 3] - 0.5 * (U[..., 1] ** 2 + U[..., 2] ** 2) / rho
        )
        return bool((p > 0.0).all())

    def max_wave_speed(self, U):
        rho = U[..., 0]
        u = U[..., 1:3] / rho[..., None]
        p = (self.gas.gamma - 1.0) * (U[..., 3] - 0.5 * rho * (u**2).sum(axis=-1))
        a = np.sqrt(self.gas.gamma * p / rho)
        return float((np.linalg.norm(u, axis=-1) + a).max())

    def _check_quad_state(self, vals):
        rho = vals[..., 0]
        if rho.size and rho.min() <= 0.0:
            raise StateError("nonpositive density at quadrature point")
        p = vals[..., 3] - 0.5 * (vals[..., 1] ** 2 + vals[..., 2] ** 2) / rho
        if p.size and p.min() <= 0.0:
            raise StateError("nonpositive pressure at quadrature point")

    # -- artificial viscosity -------------------------------------------------
    def viscosity(self, U, elems=None, with_grad=False):
        """Dilation-based elementwise viscosity; zero outside `elems`."""
        ref = self.mesh.ref
        act = np.arange(self.mesh.n_elements) if elems is None else elems
        Ue = U[act]
        L = ref.vol_basis
        G = self.geom.grad[act]
        vals = np.einsum("qi,eid->eqd", L, Ue)
        grads = np.einsum("eqia,eid->eqda", G, Ue)
        rho = vals[..., 0]
        m = vals[..., 1:3]
        drho = grads[..., 0, :]
        divm = grads[..., 1, 0] + grads[..., 2, 1]
        mdr = (m * drho).sum(axis=-1)
        div = divm / rho - mdr / rho**2
        scale = self.config.c_visc / self.mesh.p**2
        wdet = self.geom.wdet[act]
        nu = np.zeros(self.mesh.n_elements)
        nu[act] = scale * (wdet * np.abs(div)).sum(axis=1)
        if not with_grad:
            return nu
        sgnw = wdet * np.sign(div) * scale
        dnu = np.zeros((self.mesh.n_elements, ref.n_lp, self.D))
        mg = np.einsum("eqa,eqja->eqj", m, G)
        dnu_act = np.empty((len(act), ref.n_lp, self.D))
        dnu_act[..., 0] = np.einsum(
            "eq,qj->ej", sgnw * (-divm / rho**2 + 2.0 * mdr / rho**3), L
        ) - np.einsum("eq,eqj->ej", sgnw / rho**2, mg)
        for c in (1, 2):
            dnu_act[..., c] = np.einsum(
                "eq,eqj->ej", sgnw / rho, G[..., c - 1]
            ) - np.einsum("eq,qj->ej", sgnw * drho[..., c - 1] / rho**2, L)
        dnu_act[..., 3] = 0.0
        dnu[act] = dnu_act
        return nu, dnu

    def _visc_elems(self, weights):
        """Active elements plus both sides of every active interior facet."""
        m = self.mesh
        act = weights > 0.0
        if act.all():
            return None
        wf = act[m.if_elems[:, 0]] | act[m.if_elems[:, 1]]
        need = act.copy()
        if wf.any():
            need[m.if_elems[wf].ravel()] = True
        return np.where(need)[0]

    # -- public assembly -----------------------------------------------------
    def residual(self, U, weights=None):
        """Weighted residual vector, length n_lp * N_e * 4."""
        return self._assemble(U, weights, "residual")

    def jacobian(self, U, weights=None):
        """Weighted residual Jacobian as a CSR matrix."""
        return self._assemble(U, weights, "jacobian")

    def eq_rows(self, U, Y):
        """Per-element residual contributions projected onto test vectors.

        ``Y`` is (n_dof, J); the result (J, N_e) satisfies
        ``result @ rho == Y.T @ residual(U, rho)`` for any weights rho.
        """
        return self._assemble(U, None, "eq_rows", Y=np.asarray(Y, float))

    def mass(self):
        """Block-diagonal sparse mass matrix of the (deformed) mesh."""
        ne, n_lp = self.mesh.n_elements, self.mesh.ref.n_lp
        one = sp.bsr_matrix(
            (self.mblocks, np.arange(ne), np.arange(ne + 1)),
            shape=(ne * n_lp, ne * n_lp),
        )
        return sp.block_diag([one] * self.D, format="csr")

    # -- core -----------------------------------------------------------------
    def _assemble(self, U, weights, want, Y=None):
        mesh, ref, gas = self.mesh, self.mesh.ref, self.gas
        ne, n_lp, D = mesh.n_elements, ref.n_lp, self.D
        if weights is None:
            weights = np.ones(ne)
        w_int = 0.5 * (weights[mesh.if_elems[:, 0]] + weights[mesh.if_elems[:, 1]])
        w_bnd = weights[mesh.bf_elem]
        act = np.where(weights > 0.0)[0]
        fint = np.where(w_int > 0.0)[0]
        fbnd = np.where(w_bnd > 0.0)[0]

        out = {"res": None, "eqc": None, "Yarr": None,
               "rows": [], "cols": [], "vals": []}
        if want == "jacobian":
            pass
        elif want == "eq_rows":
            out["eqc"] = np.zeros((Y.shape[1], ne))
            out["Yarr"] = Y.T.reshape(Y.shape[1], D, ne, n_lp).transpose(0, 2, 3, 1)
        else:
            out["res"] = np.zeros((ne, n_lp, D))

        nu, dnu = self.viscosity(U, self._visc_elems(weights), with_grad=True)

        self._volume_terms(U, act, weights, nu, dnu, want, out)
        if len(fint):
            self._facet_terms(U, fint, w_int, nu, dnu, want, out)
        if len(fbnd):
            self._boundary_terms(U, fbnd, w_bnd, want, out)

        if want == "jacobian":
            r = np.concatenate(out["rows"])
            c = np.concatenate(out["cols"])
            v = np.concatenate(out["vals"])
            return sp.coo_matrix((v, (r, c)), shape=(self.n_dof, self.n_dof)).tocsr()
        if want == "eq_rows":
            return out["eqc"]
        return out["res"].transpose(2, 0, 1).reshape(-1)

    def _volume_terms(self, U, act, weights, nu, dnu, want, out):
        ref, gas, D = self.mesh.ref, self.gas, self.D
        Ue = U[act]
        L = ref.vol_basis
        Gp = self.geom.grad[act]
        wdet = self.geom.wdet[act]
        vals = np.einsum("qi,eid->eqd", L, Ue)
        self._check_quad_state(vals)
        grads = np.einsum("eqia,eid->eqda", Gp, Ue)
        nu_a = nu[act]
        integ = -physical_flux(vals, gas) + nu_a[:, None, None, None] * grads
        rvol = np.einsum("eq,eqda,eqia->eid", wdet, integ, Gp)
        if want == "residual":
            out["res"][act] += weights[act][:, None, None] * rvol
            return
        if want == "eq_rows":
            out["eqc"][:, act] += np.einsum("eid,jeid->je", rvol, out["Yarr"][:, act])
            return
        dF = np.stack(
            [
                flux_jacobian_normal(vals, np.array([1.0, 0.0]), gas),
                flux_jacobian_normal(vals, np.array([0.0, 1.0]), gas),
            ],
            axis=-2,
        )  # (e, q, 4, 2, 4)
        blk = -np.einsum("eq,eqdac,eqia,qj->eidjc", wdet, dF, Gp, L, optimize=True)
        stiff = np.einsum("eq,eqia,eqja->eij", wdet, Gp, Gp)
        blk += (
            nu_a[:, None, None, None, None]
            * stiff[:, :, None, :, None]
            * np.eye(D)[None, None, :, None, :]
        )
        gradint = np.einsum("eq,eqda,eqia->eid", wdet, grads, Gp)
        blk += np.einsum("eid,ejc->eidjc", gradint, dnu[act])
        blk *= weights[act][:, None, None, None, None]
        self._push(out, act, act, blk)

    def _facet_terms(self, U, fidx, w_int, nu, dnu, want, out):
        mesh, ref, gas, D = self.mesh, self.mesh.ref, self.gas, self.D
        fg = self.fgeom
        eta = self.config.br2_eta
        iL = mesh.if_elems[fidx, 0]
        iR = mesh.if_elems[fidx, 1]
        bL, bR = fg.bL[fidx], fg.bR[fidx]
        n = fg.inormal[fidx]
        ds = fg.ids[fidx]
        gLn = np.einsum("eqia,eqa->eqi", fg.gL[fidx], n)
        gRn = np.einsum("eqia,eqa->eqi", fg.gR[fidx], n)
        UL = np.einsum("eqi,eid->eqd", bL, U[iL])
        UR = np.einsum("eqi,eid->eqd", bR, U[iR])
        self._check_quad_state(UL)
        self._check_quad_state(UR)
        jump = UL - UR
        gradL = np.einsum("eqia,eid->eqda", fg.gL[fidx], U[iL])
        gradR = np.einsum("eqia,eid->eqda", fg.gR[fidx], U[iR])
        avg_n = 0.5 * np.einsum("eqda,eqa->eqd", gradL + gradR, n)
        nu_f = 0.5 * (nu[iL] + nu[iR])
        wf = w_int[fidx]

        # BR2 lifting kernel K[e, q, r] = 1/4 n(q).n(r) ds_q ds_r (Phi_L + Phi_R)
        phiL = np.einsum("eqi,eij,erj->eqr", bL, self.minv[iL], bL, optimize=True)
        phiR = np.einsum("eqi,eij,erj->eqr", bR, self.minv[iR], bR, optimize=True)
        K = (
            0.25
            * np.einsum("eqa,era->eqr", n, n)
            * (phiL + phiR)
            * ds[:, :, None]
            * ds[:, None, :]
        )

        if want == "jacobian":
            H, dHL, dHR = llf_flux(UL, UR, n, gas, with_jac=True)
        else:
            H = llf_flux(UL, UR, n, gas)

        Kj = np.einsum("eqr,eqd->erd", K, jump)
        visc_aL = np.einsum("eq,eqd,eqi->eid", ds, avg_n, bL)
        visc_aR = np.einsum("eq,eqd,eqi->eid", ds, avg_n, bR)
        visc_bL = 0.5 * np.einsum("eq,eqd,eqi->eid", ds, jump, gLn)
        visc_bR = 0.5 * np.einsum("eq,eqd,eqi->eid", ds, jump, gRn)
        pen_L = eta * np.einsum("erd,eri->eid", Kj, bL)
        pen_R = eta * np.einsum("erd,eri->eid", Kj, bR)
        visc_resL = -visc_aL - visc_bL + pen_L
        visc_resR = visc_aR - visc_bR - pen_R
        nf3 = nu_f[:, None, None]
        rL = np.einsum("eq,eqd,eqi->eid", ds, H, bL) + nf3 * visc_resL
        rR = -np.einsum("eq,eqd,eqi->eid", ds, H, bR) + nf3 * visc_resR

        if want == "residual":
            np.add.at(out["res"], iL, wf[:, None, None] * rL)
            np.add.at(out["res"], iR, wf[:, None, None] * rR)
            return
        if want == "eq_rows":
            Yarr = out["Yarr"]
            theta = np.einsum("eid,jeid->je", rL, Yarr[:, iL])
            theta += np.einsum("eid,jeid->je", rR, Yarr[:, iR])
            np.add.at(out["eqc"].T, iL, 0.5 * theta.T)
            np.add.at(out["eqc"].T, iR, 0.5 * theta.T)
            return

        eye = np.eye(D)
        wf5 = wf[:, None, None, None, None]

        def conv(test_b, trial_b, dH):
            return np.einsum("eq,eqi,eqdc,eqj->eidjc", ds, test_b, dH, trial_b, optimize=True)

        A_LL = conv(bL, bL, dHL)
        A_LR = conv(bL, bR, dHR)
        A_RL = -conv(bR, bL, dHL)
        A_RR = -conv(bR, bR, dHR)

        def pair(test, trial):
            return np.einsum("eq,eqi,eqj->eij", ds, test, trial)

        v_LL = -0.5 * pair(bL, gLn) - 0.5 * pair(gLn, bL) + eta * np.einsum(
            "eqi,eqr,erj->eij", bL, K, bL
        )
        v_LR = -0.5 * pair(bL, gRn) + 0.5 * pair(gLn, bR) - eta * np.einsum(
            "eqi,eqr,erj->eij", bL, K, bR
        )
        v_RL = 0.5 * pair(bR, gLn) - 0.5 * pair(gRn, bL) - eta * np.einsum(
            "eqi,eqr,erj->eij", bR, K, bL
        )
        v_RR = 0.5 * pair(bR, gRn) + 0.5 * pair(gRn, bR) + eta * np.einsum(
            "eqi,eqr,erj->eij", bR, K, bR
        )
        for A, v in ((A_LL, v_LL), (A_LR, v_LR), (A_RL, v_RL), (A_RR, v_RR)):
            A += (
                nu_f[:, None, None, None, None]
                * v[:, :, None, :, None]
                * eye[None, None, :, None, :]
            )

        self._push(out, iL, iL, wf5 * A_LL)
        self._push(out, iL, iR, wf5 * A_LR)
        self._push(out, iR, iL, wf5 * A_RL)
        self._push(out, iR, iR, wf5 * A_RR)
        # chain rule through the facet viscosity nu_f = (nu_L + nu_R) / 2
        for vres, tgt in ((visc_resL, iL), (visc_resR, iR)):
            for trial, dn in ((iL, dnu[iL]), (iR, dnu[iR])):
                blk = 0.5 * np.einsum("eid,ejc->eidjc", vres, dn)
                self._push(out, tgt, trial, wf5 * blk)

    def _boundary_terms(self, U, fidx, w_bnd, want, out):
        mesh, gas = self.mesh, self.gas
        fg = self.fgeom
        for tag in ("inflow", "outflow", "wall_bottom", "wall_top"):
            sel = fidx[mesh.bf_tag[fidx] == tag]
            if not len(sel):
                continue
            ke = mesh.bf_elem[sel]
            b = fg.bB[sel]
            n = fg.bnormal[sel]
            ds = fg.bds[sel]
            wsel = w_bnd[sel]
            Ub = np.einsum("eqi,eid->eqd", b, U[ke])
            self._check_quad_state(Ub)
            if tag == "inflow":
                if self._uinf is None:
                    raise ValueError("set_freestream() required for inflow facets")
                Ug = np.broadcast_to(self._uinf, Ub.shape)
                dG = None
            elif tag == "outflow":
                Ug, dG = Ub, np.broadcast_to(np.eye(4), Ub.shape + (4,))
            else:
                Ug, dG = _mirror_state(Ub, n)
            if want == "jacobian":
                H, dHL, dHR = llf_flux(Ub, Ug, n, gas, with_jac=True)
                dH = dHL if dG is None else dHL + np.einsum("...dc,...ce->...de", dHR, dG)
                blk = np.einsum("eq,eqi,eqdc,eqj->eidjc", ds, b, dH, b, optimize=True)
                self._push(out, ke, ke, wsel[:, None, None, None, None] * blk)
            else:
                H = llf_flux(Ub, Ug, n, gas)
                rb = np.einsum("eq,eqd,eqi->eid", ds, H, b)
                if want == "eq_rows":
                    proj = np.einsum("eid,jeid->je", rb, out["Yarr"][:, ke])
                    np.add.at(out["eqc"].T, ke, proj.T)
                else:
                    np.add.at(out["res"], ke, wsel[:, None, None] * rb)

    def _push(self, out, test_e, trial_e, blk):
        gd_t = self.gdof[test_e]
        gd_s = self.gdof[trial_e]
        out["rows"].append(
            np.broadcast_to(gd_t[:, :, :, None, None], blk.shape).astype(np.int64).ravel()
        )
        out["cols"].append(
            np.broadcast_to(gd_s[:, None, None, :, :], blk.shape).astype(np.int64).ravel()
        )
        out["vals"].append(blk.ravel())


def solve_steady(op, mach, init=None, config=None, callback=None):
    """Pseudo-time continuation to the steady state.

    An implicit relaxed-Newton step is taken per iteration; the CFL number
    doubles after a residual decrease, holds on a mild increase, and the
    step is rejected (CFL halved) on an inadmissible state or an increase
    beyond ``cfl_reject_ratio``. Returns the converged state and a history
    dict; raises NonConvergenceError on stall.
    """
    cfg = config or op.config
    op.set_freestream(mach)
    mesh = op.mesh
    if init is None:
        init = np.broadcast_to(
            freestream_state(mach, op.gas), (mesh.n_elements, mesh.ref.n_lp, 4)
        ).copy()
    U = init.copy()
    if not op.admissible(U):
        raise StateError("initial state is inadmissible")
    M = op.mass()
    R = op.residual(U)
    norm = float(np.linalg.norm(R))
    history = [norm]
    cfl = cfg.cfl0
    steps = 0
    J = None
    while norm >= cfg.tol and steps < cfg.max_steps:
        if J is None:
            J = op.jacobian(U)
        dt = cfl * op.h_min / op.max_wave_speed(U)
        A = (M + dt * J).tocsc()
        delta = spla.splu(A).solve(-R)
        trial = U + dt * delta.reshape(4, mesh.n_elements, -1).transpose(1, 2, 0)
        norm_trial = np.inf
        if op.admissible(trial):
            try:
                R_trial = op.residual(trial)
                norm_trial = float(np.linalg.norm(R_trial))
            except StateError:
                norm_trial = np.inf
        if np.isfinite(norm_trial) and norm_trial <= cfg.cfl_reject_ratio * norm:
            U, R, norm = trial, R_trial, norm_trial
            history.append(norm)
            if norm_trial < history[-2]:
                cfl = min(cfl * cfg.cfl_growth, cfg.cfl_max)
            J = None
            if callback:
                callback(steps, norm, cfl)
        else:
            cfl *= cfg.cfl_cut
            if cfl < cfg.cfl_min:
                raise NonConvergenceError("pseudo-time step controller stalled", history)
        steps += 1
    if norm >= cfg.tol:
        raise NonConvergenceError(
            f"no convergence after {steps} steps (residual {norm:.3e})", history
        )
    return U, {"residual_history": history, "steps": steps}
