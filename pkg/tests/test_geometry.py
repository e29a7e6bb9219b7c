import numpy as np
import pytest

from regmor.geometry import (
    PARAM_BOUNDS,
    PARAM_CENTROID,
    GeometricMap,
    InversionError,
    ParameterVector,
    bump_channel_curves,
    bump_distance,
    gordon_hall,
    gordon_hall_jacobian,
    invert_gordon_hall,
    unit_square_curves,
)


def test_parameter_vector_bounds():
    ParameterVector(0.775, 1.75)
    with pytest.raises(ValueError):
        ParameterVector(0.5, 1.75)
    ParameterVector(0.5, 1.75, extrapolation=True)
    assert np.allclose(PARAM_CENTROID, [0.775, 1.75])


def test_identity_patch(rng):
    c = unit_square_curves()
    x = rng.random((50, 2))
    assert np.abs(gordon_hall(c, x) - x).max() < 1e-14
    assert np.abs(invert_gordon_hall(c, x) - x).max() < 1e-10


def test_boundary_reproduction():
    c = bump_channel_curves(0.775)
    t = np.linspace(0, 1, 17)
    left = gordon_hall(c, np.column_stack([np.zeros_like(t), t]))
    assert np.allclose(left, np.column_stack([np.full_like(t, -1.0), t]), atol=1e-14)
    top = gordon_hall(c, np.column_stack([t, np.ones_like(t)]))
    assert np.allclose(top[:, 1], 1.0, atol=1e-14)
    btm = gordon_hall(c, np.column_stack([t, np.zeros_like(t)]))
    assert np.allclose(btm, c.btm(t), atol=1e-14)


def test_bump_extrema_and_apex():
    for alpha in (0.75, 0.775, 0.8):
        c = bump_channel_curves(alpha)
        ext = c.btm(np.array([0.2, 0.6, 0.4]))
        assert np.allclose(ext[0], [-0.5, 0.0], atol=1e-14)
        assert np.allclose(ext[1], [0.5, 0.0], atol=1e-14)
        assert abs(ext[2, 0]) < 1e-14
        assert abs(ext[2, 1] - 0.5 * np.tan(alpha / 2)) < 1e-14
    # derivative jumps exactly at the extrema parameters
    c = bump_channel_curves(0.775)
    eps = 1e-9
    dl = c.btm_d(np.array([0.2 - eps]))[0]
    dr = c.btm_d(np.array([0.2 + eps]))[0]
    assert np.linalg.norm(dl - dr) > 1e-2


def test_straight_channel():
    c = bump_channel_curves(0.0)
    t = np.linspace(0, 1, 9)
    btm = c.btm(t)
    assert np.allclose(btm[:, 1], 0.0)
    assert np.allclose(btm[:, 0], -1.0 + 2.5 * t)


def test_jacobian_matches_fd(rng):
    c = bump_channel_curves(0.8)
    x = rng.random((40, 2)) * 0.96 + 0.02
    J = gordon_hall_jacobian(c, x)
    eps = 1e-7
    for d in range(2):
        dx = np.zeros(2)
        dx[d] = eps
        fd = (gordon_hall(c, x + dx) - gordon_hall(c, x - dx)) / (2 * eps)
        assert np.abs(J[:, :, d] - fd).max() < 1e-6


def test_inversion_roundtrip(rng):
    c = bump_channel_curves(0.775)
    x = rng.random((100, 2))
    y = gordon_hall(c, x)
    xr = invert_gordon_hall(c, y)
    assert np.abs(xr - x).max() < 1e-10
    assert np.abs(gordon_hall(c, xr) - y).max() < 1e-10


def test_inversion_error_reports_point():
    c = bump_channel_curves(0.775)
    with pytest.raises(InversionError) as exc:
        invert_gordon_hall(c, np.array([[50.0, 50.0]]), maxit=3)
    assert exc.value.points.shape == (1, 2)


def test_boundary_point_maps_to_bottom():
    c = bump_channel_curves(0.78)
    y = c.btm(np.array([0.37]))
    x = invert_gordon_hall(c, y)
    assert abs(x[0, 1]) < 1e-9


def test_geometric_map_identity_and_boundaries(rng):
    gm = GeometricMap(ParameterVector(*PARAM_CENTROID))
    c = bump_channel_curves(PARAM_CENTROID[0])
    pts = gordon_hall(c, rng.random((30, 2)))
    assert np.abs(gm(pts) - pts).max() < 1e-9

    gm2 = GeometricMap(ParameterVector(0.8, 1.8))
    t = np.linspace(0, 1, 9)
    top = gordon_hall(c, np.column_stack([t, np.ones_like(t)]))
    assert np.abs(gm2(top) - top).max() < 1e-9
    # bump extrema are pinned for every parameter
    ext = np.array([[-0.5, 0.0], [0.5, 0.0]])
    assert np.abs(gm2(ext) - ext).max() < 1e-9


def test_geometric_map_jacobian(rng):
    gm = GeometricMap(ParameterVector(0.8, 1.8))
    c = bump_channel_curves(PARAM_CENTROID[0])
    pts = gordon_hall(c, rng.random((10, 2)) * 0.9 + 0.05)
    J = gm.jacobian(pts)
    eps = 1e-6
    for d in range(2):
        dx = np.zeros(2)
        dx[d] = eps
        fd = (gm(pts + dx) - gm(pts - dx)) / (2 * eps)
        assert np.abs(J[:, :, d] - fd).max() < 1e-5


def test_bump_distance():
    alpha = 0.775
    R = 0.5 / np.sin(alpha)
    apex = np.array([0.0, 0.5 * np.tan(alpha / 2)])
    d = bump_distance(np.array([apex + [0.0, 0.2], [-0.8, 0.0], [0.7, 0.1]]), alpha)
    assert abs(d[0] - 0.2) < 1e-12
    assert abs(d[1] - 0.3) < 1e-12  # distance to the left extremum
    assert abs(d[2] - np.hypot(0.2, 0.1)) < 1e-12
    d0 = bump_distance(np.array([[0.0, 0.3]]), 0.0)
    assert abs(d0[0] - 0.3) < 1e-14
