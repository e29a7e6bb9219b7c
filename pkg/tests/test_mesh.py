import numpy as np
import pytest

from regmor.mesh import (
    ElementGeometry,
    FEField,
    Mesh,
    bijectivity_check,
    field_norm,
    mass_matrix,
    reference_element,
)
from regmor.meshgen import unit_square_mesh


@pytest.mark.parametrize("p", [1, 2, 3])
def test_partition_of_unity_and_delta(p, rng):
    ref = reference_element(p)
    pts = rng.random((300, 2))
    pts = pts[pts.sum(axis=1) < 1.0][:100]
    L = ref.eval_basis(pts)
    assert np.abs(L.sum(axis=1) - 1.0).max() < 1e-12
    assert np.abs(ref.eval_basis(ref.nodes) - np.eye(ref.n_lp)).max() < 1e-10
    # gradient partition of unity: gradients sum to zero
    G = ref.eval_grad(pts)
    assert np.abs(G.sum(axis=1)).max() < 1e-10


def test_element_map_identity_p1():
    m = Mesh(
        1,
        np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
        np.array([[0, 1, 2]]),
        {(0, 0): "wall_bottom", (0, 1): "outflow", (0, 2): "inflow"},
    )
    x, J = m.element_map(0, np.array([[1 / 3, 1 / 3]]))
    assert np.allclose(x, [[1 / 3, 1 / 3]])
    assert np.allclose(J[0], np.eye(2))
    assert abs(np.linalg.det(J[0]) - 1.0) < 1e-14
    with pytest.raises(IndexError):
        m.element_map(1, np.array([[0.3, 0.3]]))


def test_element_map_curved_edge_p2():
    ref = reference_element(2)
    nodes = ref.nodes.copy()
    nodes[1] += [0.0, 0.1]  # displace the bottom mid-edge node
    m = Mesh(
        2,
        nodes,
        np.arange(6)[None, :],
        {(0, 0): "wall_bottom", (0, 1): "outflow", (0, 2): "inflow"},
    )
    x, _ = m.element_map(0, np.array([[0.5, 0.0]]))
    assert np.allclose(x, [[0.5, 0.1]], atol=1e-14)


def test_affine_jacobian_constant(square_p1, rng):
    geom = ElementGeometry(square_p1)
    spread = geom.jac.max(axis=1) - geom.jac.min(axis=1)
    assert np.abs(spread).max() < 1e-12


def test_bijectivity_check_flags_folded():
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    conn = np.array([[0, 1, 2], [1, 3, 2]])
    tags = {
        (0, 0): "wall_bottom",
        (0, 2): "inflow",
        (1, 0): "outflow",
        (1, 1): "wall_top",
    }
    mesh = Mesh(1, verts, conn, tags)
    ok, ids = bijectivity_check(mesh)
    assert ok and len(ids) == 0
    # reflect vertex 3 across the shared edge: second element folds over
    bad = verts.copy()
    bad[3] = [0.0, 0.0]
    ok, ids = bijectivity_check(mesh, bad)
    assert not ok and ids.tolist() == [1]
    # positive scaling keeps orientation
    ok, _ = bijectivity_check(mesh, 2.0 * verts)
    assert ok


def test_mass_matrix_values_and_spd(square_p2, rng):
    geom = ElementGeometry(square_p2)
    M = mass_matrix(geom, 1)
    ones = np.ones(M.shape[0])
    assert abs(ones @ (M @ ones) - 1.0) < 1e-12  # area of the unit square
    x1 = FEField(square_p2, square_p2.element_nodes()[:, :, :1].copy())
    assert abs(ones @ (M @ x1.as_vector()) - 0.5) < 1e-12
    for _ in range(50):
        v = rng.standard_normal(M.shape[0])
        assert v @ (M @ v) > 0.0
    # disjoint-support orthogonality: bases of different elements
    e0 = np.zeros(M.shape[0])
    e0[0] = 1.0
    elast = np.zeros(M.shape[0])
    elast[-1] = 1.0
    assert abs(e0 @ (M @ elast)) < 1e-15


def test_mass_matrix_rejects_inverted(square_p1):
    bad = square_p1.vertices.copy()
    bad[:, 0] *= -1.0
    geom = ElementGeometry(square_p1, bad)
    with pytest.raises(ValueError):
        mass_matrix(geom, 1)


def test_field_norms(square_p2):
    zero = FEField(square_p2, np.zeros((square_p2.n_elements, 6, 2)))
    assert field_norm(zero) == 0.0
    const = FEField(square_p2, np.full((square_p2.n_elements, 6, 1), 3.0))
    assert abs(field_norm(const, "L2") - 3.0) < 1e-12
    x1 = FEField(square_p2, square_p2.element_nodes()[:, :, :1].copy())
    assert abs(field_norm(x1, "L2") - np.sqrt(1 / 3)) < 1e-12
    assert abs(field_norm(x1, "H1") - np.sqrt(4 / 3)) < 1e-12
    with pytest.raises(ValueError):
        field_norm(x1, "H7")


def test_field_vector_roundtrip(square_p2, rng):
    f = FEField(square_p2, rng.standard_normal((square_p2.n_elements, 6, 4)))
    g = FEField.from_vector(square_p2, f.as_vector(), 4)
    assert (g.array == f.array).all()
    assert (g.as_vector() == f.as_vector()).all()


def test_mesh_validation():
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        Mesh(1, verts, np.array([[0, 1, 5]]), {})
    with pytest.raises(ValueError):  # missing tag
        Mesh(1, verts, np.array([[0, 1, 2]]), {(0, 0): "wall_bottom"})
    with pytest.raises(ValueError):  # bad tag value
        Mesh(
            1, verts, np.array([[0, 1, 2]]),
            {(0, 0): "wall", (0, 1): "outflow", (0, 2): "inflow"},
        )


def test_interior_facets_shared_by_two(square_p2):
    counts = {}
    corners = square_p2.conn[:, square_p2.ref.corner_ids]
    for k in range(square_p2.n_elements):
        for f in range(3):
            a, b = corners[k, f], corners[k, (f + 1) % 3]
            counts[(min(a, b), max(a, b))] = counts.get((min(a, b), max(a, b)), 0) + 1
    n_int = sum(1 for c in counts.values() if c == 2)
    n_bnd = sum(1 for c in counts.values() if c == 1)
    assert n_int == len(square_p2.if_elems)
    assert n_bnd == len(square_p2.bf_elem)
    assert set(counts.values()) == {1, 2}
