import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curvislice.field import Box, christoffel_field, hyperbolic_chart, zero_field
from curvislice.gridfield import (GridField, SliceRangeError, extract_slice, extract_slices,
                                  set_slice, slice_times, u_xi_field)
from curvislice.projections import CurvilinearProjection, build_parametrization

H = christoffel_field(hyperbolic_chart())
Z = zero_field(2, Box([-3, -3], [3, 3]))
A = np.array([[1.0, 2.0], [0.0, 3.0]])


def affine(X):
    return np.atleast_2d(X) @ A.T


def test_lattice_shape_and_nodes():
    g = GridField.from_function(affine, Box([0, 0], [1, 2]), 0.25)
    assert g.shape == (5, 9) and g.components == 2
    assert np.allclose(g.nodes()[-1, -1], [1, 2])
    with pytest.raises(ValueError):
        GridField([0, 0], 1.0, (1, 3), 1, np.zeros(3))
    with pytest.raises(ValueError):
        GridField([0, 0], 1.0, (2, 2), 1, np.array([0, np.nan, 0, 0]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 2)), min_size=1, max_size=20))
def test_multilinear_reproduces_affine(pts):
    g = GridField.from_function(lambda X: affine(X) + [0.5, -1], Box([-1, -1], [1, 2]), 0.3)
    X = np.array(pts)
    assert np.max(np.abs(g.interpolate(X) - affine(X) - [0.5, -1])) <= 1e-12


def test_outside_box_is_nan():
    g = GridField.from_function(affine, Box([0, 0], [1, 1]), 0.5)
    assert np.all(np.isnan(g.interpolate([[2.0, 0.5]])))


def test_interpolation_error_second_order():
    f = lambda X: np.column_stack([np.sin(X[:, 0]) * X[:, 1], np.cos(X[:, 1])])
    X = np.random.default_rng(0).uniform(0.05, 0.95, size=(200, 2))
    errs = [np.max(np.abs(GridField.from_function(f, Box([0, 0], [1, 1]), h).interpolate(X) - f(X)))
            for h in (1 / 8, 1 / 16)]
    assert errs[0] / errs[1] >= 3


def test_round_trip_file_and_dict(tmp_path):
    g = GridField.from_function(affine, Box([0, 0], [1, 1]), 0.25)
    path = str(tmp_path / "u.json")
    g.save(path)
    head = json.load(open(path))
    assert head["shape"] == [5, 5] and head["components"] == 2
    raw = open(path + ".bin", "rb").read()
    assert len(raw) == 25 * 2 * 8
    # little-endian float64, row-major, component fastest
    assert np.frombuffer(raw, "<f8")[2:4].tolist() == affine([[0, 0.25]])[0].tolist()
    assert np.array_equal(GridField.load(path).values, g.values)
    assert np.array_equal(GridField.from_dict(g.to_dict()).values, g.values)
    with pytest.raises(ValueError):
        GridField.from_dict({"origin": [0, 0], "spacing": [1, 1], "shape": [2, 2]})


def test_constant_field_slice_is_constant():
    par = build_parametrization(Z, [0, 0], [0.6, 0.8], 1, 1, 0.1)
    c = np.array([0.3, -2.0])
    u = GridField.from_function(lambda X: np.tile(c, (len(X), 1)), Box([-2, -2], [2, 2]), 0.5)
    s = extract_slice(u, par, par.y_from_coords([0.4]), 0.05)
    assert np.allclose(s.values[s.mask], c @ [0.6, 0.8], atol=1e-14)


def test_affine_slice_closed_form():
    par = build_parametrization(Z, [0, 0], [1, 0], 1, 1, 0.1)
    u = GridField.from_function(affine, Box([-2, -2], [2, 2]), 0.25)
    beta = 0.3
    s = extract_slice(u, par, np.array([0.0, beta]), 0.05)
    assert np.allclose(s.values, s.t + 2 * beta, atol=1e-12)
    header, rows = s.to_csv_rows()
    assert header == ["t", "mask", "value", "v_1", "v_2"] and rows.shape[0] == s.t.size
    assert np.all(np.diff(s.t) > 0)


def test_hyperbolic_slice_is_exponential():
    par = build_parametrization(H, [0, 1], [0, 1], 0.5, 1.0, 0.1)
    u = GridField.from_function(lambda X: np.column_stack([0 * X[:, 0], X[:, 1]]),
                                Box([-1, 0.2], [1, 3.5]), 1 / 16, keep_analytic=True)
    s = extract_slice(u, par, np.zeros(2), 0.05)
    k = np.argmin(np.abs(s.t - 0.5))
    assert s.values[k] == pytest.approx(np.e, abs=1e-6)
    assert np.allclose(s.values[s.mask], np.exp(2 * s.t[s.mask]), rtol=1e-7)
    grid = extract_slice(u, par, np.zeros(2), 0.05, use_analytic=False)
    assert grid.h_space == u.h and s.h_space == 0.0


def test_slice_mask_outside_domain():
    par = build_parametrization(Z, [0, 0], [1, 0], 1, 2, 0.1)
    u = GridField.from_function(affine, Box([-1, -1], [1, 1]), 0.25)
    s = extract_slice(u, par, np.zeros(2), 0.1)
    assert np.array_equal(s.mask, np.abs(s.t) <= 1 + 1e-12)
    assert np.all(np.isnan(s.values[~s.mask]))
    assert s.components() == [(int(np.argmax(s.mask)), int(np.argmax(s.mask)) + int(s.mask.sum()))]


def test_slice_analytic_vs_grid_second_order():
    par = build_parametrization(H, [0, 1], [0.6, 0.8], 0.3, 0.3, 0.05)
    f = lambda X: np.column_stack([np.sin(X[:, 0]) * X[:, 1], X[:, 1] ** 2])
    y = par.y_from_coords([0.1])
    errs = []
    for h in (1 / 16, 1 / 32):
        u = GridField.from_function(f, Box([-1, 0.3], [1, 2]), h, keep_analytic=True)
        a = extract_slice(u, par, y, 0.01)
        g = extract_slice(u, par, y, 0.01, use_analytic=False)
        errs.append(np.nanmax(np.abs(a.values - g.values)))
    assert errs[0] / errs[1] >= 3


def test_base_point_checks():
    par = build_parametrization(Z, [0, 0], [1, 0], 0.5, 1, 0.1)
    u = GridField.from_function(affine, Box([-1, -1], [1, 1]), 0.25)
    with pytest.raises(SliceRangeError):
        extract_slice(u, par, np.array([0.1, 0.0]), 0.1)
    with pytest.raises(SliceRangeError):
        extract_slice(u, par, np.array([0.0, 0.9]), 0.1)


def test_batched_slices_match_single():
    par = build_parametrization(H, [0, 1], [0.6, 0.8], 0.3, 0.3, 0.05)
    u = GridField.from_function(lambda X: X[:, ::-1] ** 2, Box([-1, 0.3], [1, 2]), 1 / 16)
    Y = np.array([par.y_from_coords([c]) for c in (-0.1, 0.0, 0.2)])
    many = extract_slices(u, par, Y, 0.02)
    for y, s in zip(Y, many):
        one = extract_slice(u, par, y, 0.02)
        assert np.allclose(s.values, one.values, equal_nan=True, atol=1e-12)


def test_set_slice_examples():
    par = build_parametrization(Z, [0, 0], [1, 0], 1, 1.5, 0.1)
    box = Box([-1, -1], [1, 1])
    (iv,) = set_slice(lambda X: box.contains(X), par, np.zeros(2), 0.01)
    assert iv == pytest.approx((-1, 1), abs=1e-9)
    (iv,) = set_slice(lambda X: box.contains(X) & (X[:, 0] > 0.3), par, np.zeros(2), 0.01)
    assert iv == pytest.approx((0.3, 1), abs=1e-9)
    (iv,) = set_slice(lambda X: np.linalg.norm(X, axis=1) < 0.5, par, np.array([0, 0.3]), 0.01)
    assert iv == pytest.approx((-0.4, 0.4), abs=1e-9)


def test_slice_times_symmetric():
    t = slice_times(1.0, 0.3)
    assert np.allclose(t, -t[::-1]) and t[-1] <= 1.0


def test_u_xi_field_examples():
    u = GridField.from_function(affine, Box([-0.5, -0.5], [0.5, 0.5]), 0.25)
    xi = np.array([0.6, 0.8])
    p = CurvilinearProjection(build_parametrization(Z, [0, 0], xi, 1, 1, 0.1))
    g = u_xi_field(u, p)
    assert np.allclose(g.values[..., 0], u.values @ xi)
    uh = GridField.from_function(lambda X: np.column_stack([0 * X[:, 0], X[:, 1]]),
                                 Box([0.1, 0.8], [0.3, 1.3]), 0.05, keep_analytic=True)
    ph = CurvilinearProjection(build_parametrization(H, [0.2, 1], [0, 1], 0.3, 0.5, 0.05))
    gh = u_xi_field(uh, ph)
    s = uh.nodes()[..., 1]
    assert gh.mask.all()
    assert np.max(np.abs(gh.values[..., 0] - s ** 2)) <= 1e-6


def test_slice_identity_along_curves():
    par = build_parametrization(H, [0, 1], [0.6, 0.8], 0.3, 0.3, 0.05)
    p = CurvilinearProjection(par)
    f = lambda X: np.column_stack([np.sin(X[:, 0]) * X[:, 1], X[:, 1] ** 2])
    u = GridField.from_function(f, Box([-0.4, 0.6], [0.4, 1.4]), 1 / 32, keep_analytic=True)
    g = u_xi_field(u, p)
    s = extract_slice(u, par, par.y_from_coords([0.1]), 0.05)
    ok = s.mask & np.all(np.abs(s.points - [0, 1]) < 0.35, axis=1)
    gv = g.interpolate(s.points[ok])[:, 0]
    # nodes near the edge of the projection domain are masked in the projected field
    assert np.isfinite(gv).sum() >= ok.sum() - 2
    assert np.nanmax(np.abs(gv - s.values[ok])) <= 20 * u.h ** 2
