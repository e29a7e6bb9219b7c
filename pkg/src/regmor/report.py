"""Post-training evaluation series: the CSV data behind the study figures.

Everything here works from a completed run directory: stored snapshots are
reused, hf references for held-out test parameters are solved once and
persisted, and ROM families at increasing basis size are rebuilt from the
stored snapshots. Emitted files (under ``report/``):

    pod_error.csv       N,variant,kind,E_avg       (kind: projection|eqlspg)
    greedy_error.csv    N,E_avg
    test_space.csv      N,variant,J_es
    eq_sampling.csv     N,variant,tol_eq,Q,percent
    dual_residual.csv   N,mu1,mu2,dual_residual,E_rel
    summary.csv         variant,mode,N,J_es,Q,n_elements,n_train
"""

import json
import os
import time

import numpy as np

from . import io as rio
from .euler import EulerOperator, GasModel, solve_steady
from .geometry import PARAM_BOUNDS, PARAM_CENTROID, ParameterVector
from .mesh import ElementGeometry
from .pipeline import RunDirectory, _deform, _load_fine, _mu_tag, train_grid
from .rom import (
    BlockGram,
    EQRule,
    ReducedModel,
    build_eq,
    build_test_rob,
    dual_residual,
    dual_residual_factors,
    evaluate_online,
    gram_schmidt_update,
    pod_fields,
    solve_lspg,
)

__all__ = ["ReportBuilder", "random_test_parameters"]


def random_test_parameters(n, seed=0):
    rng = np.random.default_rng(seed)
    lo, hi = PARAM_BOUNDS[:, 0], PARAM_BOUNDS[:, 1]
    return lo + (hi - lo) * rng.random((n, 2))


class ReportBuilder:
    """Shared evaluation machinery over one run directory."""

    def __init__(self, run, log=None):
        self.run = run if isinstance(run, RunDirectory) else RunDirectory(run)
        self.cfg = self.run.cfg
        self.log = log or (lambda s: None)
        self.mesh, self.ref, self.map_model = _load_fine(self.run)
        self.gas = GasModel(self.cfg.gamma)
        self.X = BlockGram(self.mesh, "L2")
        self.Xtest = BlockGram(self.mesh, "H1")
        self.chol = dual_residual_factors(self.Xtest)
        self.areas = ElementGeometry(self.mesh).areas
        self.mesh_checksum = rio.sha256_file(self.run.path("fine", "mesh.txt"))
        self._ops = {}
        self._jacs = {}

    # -- hf snapshots and references -----------------------------------------
    def _variant_model(self, variant):
        return self.map_model if variant == "lagrangian" else None

    def deform(self, variant, mu):
        return _deform(self.mesh, self.ref, self._variant_model(variant), np.asarray(mu))

    def operator(self, variant, mu):
        key = (variant, round(float(mu[0]), 12), round(float(mu[1]), 12))
        if key not in self._ops:
            op = EulerOperator(self.mesh, self.deform(variant, mu), self.gas, self.cfg.solver)
            op.set_freestream(float(mu[1]))
            self._ops[key] = op
        return self._ops[key]

    def snapshot(self, variant, mu, subdir="fine", prefix="snap", init=None):
        """Load or solve (and persist) an hf state for this variant."""
        tag = _mu_tag(np.asarray(mu, float))
        fp = self.run.path(subdir, f"{prefix}_{variant}_{tag}.txt")
        if os.path.exists(fp):
            vec, _, chk = rio.read_field(fp)
            if chk == self.mesh_checksum:
                return vec.reshape(4, self.mesh.n_elements, -1).transpose(1, 2, 0)
        op = self.operator(variant, mu)
        t0 = time.perf_counter()
        U, info = solve_steady(op, float(mu[1]), init=init)
        self.log(
            f"hf {variant} {np.round(np.asarray(mu, float), 4)}: "
            f"{info['steps']} steps {time.perf_counter() - t0:.0f}s"
        )
        rio.write_field(fp, U.transpose(2, 0, 1).reshape(-1), mu, self.mesh_checksum)
        return U

    def training_snapshots(self, variant):
        snaps = []
        prev = None
        for mu in train_grid(self.cfg):
            U = self.snapshot(variant, mu, init=prev)
            prev = U
            snaps.append((np.asarray(mu, float), U))
        return snaps

    def test_references(self, variant, test_mus):
        refs = []
        prev = None
        for mu in np.atleast_2d(test_mus):
            U = self.snapshot(variant, mu, subdir="report", prefix="ref", init=prev)
            prev = U
            refs.append(U)
        return refs

    def jacobian(self, variant, mu, U):
        key = (variant, round(float(mu[0]), 12), round(float(mu[1]), 12))
        if key not in self._jacs:
            self._jacs[key] = self.operator(variant, mu).jacobian(U)
        return self._jacs[key]

    # -- ROM families ----------------------------------------------------------
    def pod_family(self, variant, Ns, tol_eq=None, with_eq=True):
        """POD trial bases truncated at each N, with test ROB and EQ."""
        tol_eq = self.cfg.tol_eq if tol_eq is None else tol_eq
        snaps = self.training_snapshots(variant)
        vecs = [U.transpose(2, 0, 1).reshape(-1) for _, U in snaps]
        Zfull = pod_fields(vecs, self.X, count=max(Ns))
        out = {}
        for N in Ns:
            if N > Zfull.shape[1]:
                continue
            Z = Zfull[:, :N]
            out[N] = self._assemble_rom(variant, snaps, Z, tol_eq, with_eq)
        return out

    def greedy_family(self, variant, record, tol_eq=None, with_eq=True):
        """Rebuild the per-iteration greedy models from stored snapshots."""
        tol_eq = self.cfg.tol_eq if tol_eq is None else tol_eq
        mus = train_grid(self.cfg)
        out = {}
        Z = np.zeros((self.mesh.n_elements * self.mesh.ref.n_lp * 4, 0))
        have = []
        for rec in record:
            sampled = rec["sampled"]
            for k in sampled[len(have):]:
                mu = mus[k]
                U = self.snapshot(variant, mu)
                Z = gram_schmidt_update(
                    Z, U.transpose(2, 0, 1).reshape(-1), self.X
                )
                have.append(k)
            snaps = [(np.asarray(mus[k], float), self.snapshot(variant, mus[k])) for k in have]
            out[rec["N"]] = self._assemble_rom(variant, snaps, Z.copy(), tol_eq, with_eq)
        return out

    def _assemble_rom(self, variant, snaps, Z, tol_eq, with_eq=True):
        jacs = [self.jacobian(variant, mu, U) for mu, U in snaps]
        Y = build_test_rob(jacs, Z, self.Xtest, self.cfg.tol_test)
        alphas = np.array(
            [Z.T @ self.X.apply(U.transpose(2, 0, 1).reshape(-1)) for _, U in snaps]
        )
        if with_eq:
            Gb, bb = [], []
            for (mu, U), a in zip(snaps, alphas):
                op = self.operator(variant, mu)
                Ur = (Z @ a).reshape(4, self.mesh.n_elements, -1).transpose(1, 2, 0)
                g = op.eq_rows(Ur, Y)
                Gb.append(g)
                bb.append(g.sum(axis=1))
            eq = build_eq(Gb, bb, self.areas, tol_eq)
        else:
            eq = EQRule(np.ones(self.mesh.n_elements), 0.0, 0.0)
        model = ReducedModel(
            self.mesh, self.ref, self._variant_model(variant), Z, Y, eq,
            np.array([m for m, _ in snaps]), alphas, self.gas, self.cfg.solver,
            self.cfg.rbf_threshold,
        )
        model._ops = {
            (round(float(m[0]), 14), round(float(m[1]), 14)): self.operator(variant, m)
            for m, _ in snaps
        }
        return model

    # -- error measures ---------------------------------------------------------
    def projection_error(self, variant, Z, mu, ref):
        """Relative L2 error of the X-orthogonal projection, measured with
        the deformed-mesh quadrature."""
        vec = ref.transpose(2, 0, 1).reshape(-1)
        proj = Z @ (Z.T @ self.X.apply(vec))
        Xdef = BlockGram(
            self.mesh, "L2", ElementGeometry(self.mesh, self.deform(variant, mu))
        )
        return Xdef.norm(vec - proj) / Xdef.norm(vec)

    def rom_error(self, model, variant, mu, ref):
        res = evaluate_online(model, np.asarray(mu, float), reference=ref)
        return res.get("error", np.nan), res

    def dual_residual_of(self, model, variant, mu, alpha):
        op = self.operator(variant, mu)
        U = (model.Z @ alpha).reshape(4, self.mesh.n_elements, -1).transpose(1, 2, 0)
        return dual_residual(op.residual(U), self.Xtest, self.chol)


def write_csv(path, header, rows):
    text = header + "\n" + "\n".join(rows) + ("\n" if rows else "\n")
    rio.atomic_write(path, text)
