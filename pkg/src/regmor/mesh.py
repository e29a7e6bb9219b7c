"""Isoparametric triangular meshes and reference-element machinery.

A mesh stores node coordinates plus an ``(N_e, n_lp)`` connectivity matrix
of a nodal discretization of degree ``p``; deforming a mesh means replacing
the coordinate array while keeping the connectivity. Fields over a mesh are
``(N_e, n_lp, D)`` coefficient arrays; the flat vector form uses the index
``i + n_lp*k + n_lp*N_e*d`` (node fastest, then element, then component).
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .quadrature import interval_rule, triangle_rule

__all__ = [
    "ReferenceElement",
    "Mesh",
    "FEField",
    "ElementGeometry",
    "FacetGeometry",
    "reference_element",
    "bijectivity_check",
    "mass_matrix",
    "field_norm",
]

BOUNDARY_TAGS = ("inflow", "outflow", "wall_bottom", "wall_top")

# reference facet f runs CCW from corner f to corner f+1:
#   f=0: (0,0)->(1,0),  f=1: (1,0)->(0,1),  f=2: (0,1)->(0,0)
_FACET_START = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
_FACET_DIR = np.array([[1.0, 0.0], [-1.0, 1.0], [0.0, -1.0]])


def _monomial_powers(p):
    return [(i, j) for t in range(p + 1) for j in range(t + 1) for i in [t - j]]


def _mono_vander(pts, powers):
    x, y = pts[:, 0], pts[:, 1]
    return np.column_stack([x**i * y**j for i, j in powers])


def _mono_grad_vander(pts, powers):
    x, y = pts[:, 0], pts[:, 1]
    cols = []
    for i, j in powers:
        gx = i * x ** max(i - 1, 0) * y**j if i > 0 else np.zeros_like(x)
        gy = j * x**i * y ** max(j - 1, 0) if j > 0 else np.zeros_like(x)
        cols.append(np.stack([gx, gy], axis=-1))
    return np.stack(cols, axis=1)  # (npts, nbasis, 2)


class ReferenceElement:
    """Degree-p Lagrange element on the unit triangle.

    Holds equispaced nodes, basis evaluation tables and quadrature exact to
    degree ``2p + 1`` (volume) and ``p + 1``-point Gauss-Legendre (facets).
    """

    def __init__(self, p):
        if p < 1:
            raise ValueError("degree must be >= 1")
        self.p = p
        nodes = [(i / p, j / p) for j in range(p + 1) for i in range(p + 1 - j)]
        self.nodes = np.array(nodes)
        self.n_lp = len(nodes)
        self._powers = _monomial_powers(p)
        V = _mono_vander(self.nodes, self._powers)
        self._coeff = np.linalg.inv(V)  # basis_i = sum_m coeff[m, i] mono_m

        # local ids of the corners (0,0), (1,0), (0,1)
        self.corner_ids = np.array([0, p, self.n_lp - 1])
        tol = 1e-12
        on = [
            np.abs(self.nodes[:, 1]) < tol,
            np.abs(self.nodes.sum(axis=1) - 1.0) < tol,
            np.abs(self.nodes[:, 0]) < tol,
        ]
        params = [
            self.nodes[:, 0],
            self.nodes[:, 1],
            1.0 - self.nodes[:, 1],
        ]
        self.facet_nodes = []
        for f in range(3):
            ids = np.where(on[f])[0]
            self.facet_nodes.append(ids[np.argsort(params[f][ids])])

        self.quad_pts, self.quad_w = triangle_rule(2 * p + 1)
        self.fquad_t, self.fquad_w = interval_rule(p + 1)

        self.vol_basis = self.eval_basis(self.quad_pts)
        self.vol_grad = self.eval_grad(self.quad_pts)
        self.node_grad = self.eval_grad(self.nodes)

        # facet trace tables, forward (own param t) and reversed (1 - t)
        self.facet_basis = []
        self.facet_grad = []
        self.facet_basis_rev = []
        self.facet_grad_rev = []
        for f in range(3):
            for store_b, store_g, t in (
                (self.facet_basis, self.facet_grad, self.fquad_t),
                (self.facet_basis_rev, self.facet_grad_rev, 1.0 - self.fquad_t),
            ):
                X = _FACET_START[f] + np.outer(t, _FACET_DIR[f])
                store_b.append(self.eval_basis(X))
                store_g.append(self.eval_grad(X))

    def eval_basis(self, pts):
        """Values of all Lagrange bases at `pts`; shape (npts, n_lp)."""
        return _mono_vander(np.atleast_2d(pts), self._powers) @ self._coeff

    def eval_grad(self, pts):
        """Reference gradients at `pts`; shape (npts, n_lp, 2)."""
        G = _mono_grad_vander(np.atleast_2d(pts), self._powers)
        return np.einsum("qmd,mi->qid", G, self._coeff)


@lru_cache(maxsize=8)
def reference_element(p):
    return ReferenceElement(p)


class Mesh:
    """Triangular isoparametric mesh with tagged boundary facets.

    Parameters
    ----------
    p : element degree
    vertices : (N_v, 2) node coordinates (all isoparametric nodes)
    conn : (N_e, n_lp) integer connectivity into `vertices`
    boundary_tags : dict mapping (element, local_facet) -> tag string
    """

    def __init__(self, p, vertices, conn, boundary_tags):
        self.p = p
        self.ref = reference_element(p)
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.conn = np.ascontiguousarray(conn, dtype=np.int64)
        if self.conn.shape[1] != self.ref.n_lp:
            raise ValueError("connectivity width does not match degree")
        if self.conn.min() < 0 or self.conn.max() >= len(self.vertices):
            raise ValueError("connectivity indexes an invalid vertex")
        self.n_elements = self.conn.shape[0]
        self.n_vertices = self.vertices.shape[0]
        self._build_topology(dict(boundary_tags))

    def _build_topology(self, tags):
        corners = self.conn[:, self.ref.corner_ids]
        edge_of = {}
        inter, bound = [], []
        for k in range(self.n_elements):
            for f in range(3):
                a, b = corners[k, f], corners[k, (f + 1) % 3]
                key = (min(a, b), max(a, b))
                if key in edge_of:
                    k2, f2 = edge_of.pop(key)
                    inter.append((k2, f2, k, f))
                else:
                    edge_of[key] = (k, f)
        for key, (k, f) in edge_of.items():
            tag = tags.pop((k, f), None)
            if tag is None:
                raise ValueError(f"boundary facet {(k, f)} carries no tag")
            if tag not in BOUNDARY_TAGS:
                raise ValueError(f"unknown boundary tag {tag!r}")
            bound.append((k, f, tag))
        if tags:
            raise ValueError(f"tags given for non-boundary facets: {sorted(tags)}")
        inter.sort()
        bound.sort()
        self.if_elems = np.array([(e[0], e[2]) for e in inter], dtype=np.int64).reshape(-1, 2)
        self.if_facets = np.array([(e[1], e[3]) for e in inter], dtype=np.int64).reshape(-1, 2)
        self.bf_elem = np.array([e[0] for e in bound], dtype=np.int64)
        self.bf_facet = np.array([e[1] for e in bound], dtype=np.int64)
        self.bf_tag = np.array([e[2] for e in bound])
        self.neighbors = np.full((self.n_elements, 3), -1, dtype=np.int64)
        for kL, fL, kR, fR in inter:
            self.neighbors[kL, fL] = kR
            self.neighbors[kR, fR] = kL

    @property
    def boundary_tags(self):
        return {
            (int(k), int(f)): str(t)
            for k, f, t in zip(self.bf_elem, self.bf_facet, self.bf_tag)
        }

    def element_nodes(self, coords=None):
        """Node coordinates per element, shape (N_e, n_lp, 2)."""
        coords = self.vertices if coords is None else coords
        return coords[self.conn]

    def element_map(self, k, X, coords=None):
        """Evaluate the elemental mapping and its Jacobian at reference points.

        Returns ``(points (npts, 2), jacobians (npts, 2, 2))``.
        """
        if not 0 <= k < self.n_elements:
            raise IndexError(f"element index {k} out of range")
        Y = self.element_nodes(coords)[k]
        L = self.ref.eval_basis(X)
        G = self.ref.eval_grad(X)
        return L @ Y, np.einsum("ni,qnd->qid", Y, G)

    def with_vertices(self, coords):
        """Same connectivity and tags over new node coordinates."""
        m = object.__new__(Mesh)
        m.p = self.p
        m.ref = self.ref
        m.vertices = np.ascontiguousarray(coords, dtype=float)
        m.conn = self.conn
        m.n_elements = self.n_elements
        m.n_vertices = self.n_vertices
        for name in ("if_elems", "if_facets", "bf_elem", "bf_facet", "bf_tag", "neighbors"):
            setattr(m, name, getattr(self, name))
        return m


@dataclass
class FEField:
    """DG coefficient field: values at the nodes of every element."""

    mesh: Mesh
    array: np.ndarray  # (N_e, n_lp, D)

    def __post_init__(self):
        self.array = np.asarray(self.array, dtype=float)
        if self.array.shape[:2] != (self.mesh.n_elements, self.mesh.ref.n_lp):
            raise ValueError("coefficient array shape does not match mesh")

    @property
    def ncomp(self):
        return self.array.shape[2]

    def as_vector(self):
        """Flat vector in node-fastest, element, component order."""
        return self.array.transpose(2, 0, 1).reshape(-1).copy()

    @classmethod
    def from_vector(cls, mesh, vec, ncomp):
        n_lp = mesh.ref.n_lp
        arr = np.asarray(vec, float).reshape(ncomp, mesh.n_elements, n_lp)
        return cls(mesh, arr.transpose(1, 2, 0).copy())

    def copy(self):
        return FEField(self.mesh, self.array.copy())


class ElementGeometry:
    """Volume metric terms of a (possibly deformed) mesh at quadrature points."""

    def __init__(self, mesh, coords=None):
        self.mesh = mesh
        ref = mesh.ref
        Y = mesh.element_nodes(coords)
        self.nodes = Y
        jac = np.einsum("eni,qnd->eqid", Y, ref.vol_grad)
        self.jac = jac
        self.det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
        inv = np.empty_like(jac)
        inv[..., 0, 0] = jac[..., 1, 1]
        inv[..., 1, 1] = jac[..., 0, 0]
        inv[..., 0, 1] = -jac[..., 0, 1]
        inv[..., 1, 0] = -jac[..., 1, 0]
        self.inv = inv / self.det[..., None, None]
        self.wdet = ref.quad_w[None, :] * self.det
        # physical basis gradients: grad_x l_i = Jinv^T grad_X l_i
        self.grad = np.einsum("eqcd,qic->eqid", self.inv, ref.vol_grad)
        self.areas = self.wdet.sum(axis=1)


class FacetGeometry:
    """Facet traces, normals and arc elements for interior/boundary facets.

    Interior facets are oriented from their first (left) element; the right
    element traverses the same physical points with parameter ``1 - t``.
    """

    def __init__(self, mesh, coords=None):
        self.mesh = mesh
        ref = mesh.ref
        Y = mesh.element_nodes(coords)
        nfq = len(ref.fquad_t)

        def side(elems, facets, reverse):
            B = ref.facet_basis_rev if reverse else ref.facet_basis
            G = ref.facet_grad_rev if reverse else ref.facet_grad
            basis = np.empty((len(elems), nfq, ref.n_lp))
            gref = np.empty((len(elems), nfq, ref.n_lp, 2))
            for f in range(3):
                m = facets == f
                basis[m] = B[f]
                gref[m] = G[f]
            nodes = Y[elems]
            pts = np.einsum("eqn,end->eqd", basis, nodes)
            jac = np.einsum("eni,eqnd->eqid", nodes, gref)
            det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
            inv = np.empty_like(jac)
            inv[..., 0, 0] = jac[..., 1, 1]
            inv[..., 1, 1] = jac[..., 0, 0]
            inv[..., 0, 1] = -jac[..., 0, 1]
            inv[..., 1, 0] = -jac[..., 1, 0]
            inv /= det[..., None, None]
            grad = np.einsum("eqcd,eqic->eqid", inv, gref)
            tdir = _FACET_DIR[facets] * (-1.0 if reverse else 1.0)
            tang = np.einsum("eqid,ed->eqi", jac, tdir)
            return basis, grad, pts, tang

        iL, iR = mesh.if_elems[:, 0], mesh.if_elems[:, 1]
        fL, fR = mesh.if_facets[:, 0], mesh.if_facets[:, 1]
        self.bL, self.gL, ptsL, tangL = side(iL, fL, reverse=False)
        self.bR, self.gR, ptsR, _ = side(iR, fR, reverse=True)
        if len(iL) and not np.allclose(ptsL, ptsR, atol=1e-9):
            raise ValueError("interior facet traces do not coincide")
        self.ipts = ptsL
        speed = np.linalg.norm(tangL, axis=-1)
        # outward normal of the left element: rotate tangent by -90 degrees
        self.inormal = np.stack([tangL[..., 1], -tangL[..., 0]], axis=-1)
        self.inormal /= speed[..., None]
        self.ids = speed * ref.fquad_w[None, :]

        bB, gB, ptsB, tangB = side(mesh.bf_elem, mesh.bf_facet, reverse=False)
        self.bB, self.gB, self.bpts = bB, gB, ptsB
        bspeed = np.linalg.norm(tangB, axis=-1)
        self.bnormal = np.stack([tangB[..., 1], -tangB[..., 0]], axis=-1)
        self.bnormal /= bspeed[..., None]
        self.bds = bspeed * ref.fquad_w[None, :]


def bijectivity_check(mesh, coords=None):
    """Flag elements whose mapping Jacobian is non-positive anywhere.

    Checks all volume quadrature points and all element nodes. Returns
    ``(ok, inverted_element_ids)``.
    """
    ref = mesh.ref
    Y = mesh.element_nodes(coords)
    bad = np.zeros(mesh.n_elements, dtype=bool)
    for G in (ref.vol_grad, ref.node_grad):
        jac = np.einsum("eni,qnd->eqid", Y, G)
        det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
        bad |= (det <= 0.0).any(axis=1)
    ids = np.where(bad)[0]
    return len(ids) == 0, ids


def mass_blocks(geom):
    """Per-element scalar mass matrices, shape (N_e, n_lp, n_lp)."""
    L = geom.mesh.ref.vol_basis
    return np.einsum("eq,qi,qj->eij", geom.wdet, L, L)


def mass_matrix(geom, ncomp):
    """Block-diagonal sparse mass matrix for an ncomp-component field.

    Raises if the geometry carries inverted elements.
    """
    if (geom.det <= 0.0).any():
        raise ValueError("mesh has inverted elements")
    blocks = mass_blocks(geom)
    n_lp = geom.mesh.ref.n_lp
    ne = geom.mesh.n_elements
    big = sp.block_diag([sp.bsr_matrix(
        (blocks, np.arange(ne), np.arange(ne + 1)),
        shape=(ne * n_lp, ne * n_lp))] * ncomp, format="csr")
    return big


def gram_blocks(geom, kind):
    """Per-element Gram blocks of the L2 or broken-H1 inner product."""
    M = mass_blocks(geom)
    if kind == "L2":
        return M
    if kind == "H1":
        K = np.einsum("eq,eqid,eqjd->eij", geom.wdet, geom.grad, geom.grad)
        return M + K
    raise ValueError(f"unknown norm kind {kind!r}")


def field_norm(field, kind="L2", geom=None):
    """Quadrature norm of a DG field: 'L2' or 'H1' (broken)."""
    geom = geom or ElementGeometry(field.mesh)
    ref = field.mesh.ref
    vals = np.einsum("qi,eid->eqd", ref.vol_basis, field.array)
    total = np.einsum("eq,eqd->", geom.wdet, vals**2)
    if kind == "H1":
        g = np.einsum("eqia,eid->eqda", geom.grad, field.array)
        total += np.einsum("eq,eqda->", geom.wdet, g**2)
    elif kind != "L2":
        raise ValueError(f"unknown norm kind {kind!r}")
    return float(np.sqrt(total))
