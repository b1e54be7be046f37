import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from curvislice.bv1d import analyze_slice, slice_from_values
from curvislice.field import (Box, QuadraticSurface, christoffel_field, euclidean_chart,
                              hyperbolic_chart, zero_field)
from curvislice.gridfield import GridField
from curvislice.projections import build_family, build_parametrization
from curvislice.symgrad import (DerivativeAtJumpError, DirectionDegenerateError,
                                InsufficientDataError, SymMatrix, analytic_E, bound_checks,
                                default_probes, parallelogram_defect, parallelogram_residual,
                                q_tilde, reconstruct_e, shell_egradient, shell_limit,
                                slice_derivative, slice_identity_check, solve_symmetric, tilde_e)

Z = zero_field(2, Box([-3, -3], [3, 3]))
H = christoffel_field(hyperbolic_chart())
A = np.array([[1.0, 2.0], [0.0, 3.0]])


def hyperbolic_E_oracle(u_expr, point):
    """Curvilinear strain with sympy Christoffel symbols of dx^2/x2^2."""
    x1, x2 = sp.symbols("x1 x2", positive=True)
    X = [x1, x2]
    g = sp.eye(2) / x2 ** 2
    gi = g.inv()
    Gam = [[[sum(gi[l, m] * (sp.diff(g[m, i], X[j]) + sp.diff(g[m, j], X[i])
                             - sp.diff(g[i, j], X[m])) for m in range(2)) / 2
             for j in range(2)] for i in range(2)] for l in range(2)]
    u = [e(x1, x2) for e in u_expr]
    E = sp.Matrix(2, 2, lambda i, j: (sp.diff(u[j], X[i]) + sp.diff(u[i], X[j])) / 2
                  - sum(Gam[l][i][j] * u[l] for l in range(2)))
    return np.array(E.subs({x1: point[0], x2: point[1]}), dtype=float)


def test_symmatrix_storage():
    M = SymMatrix.from_matrix([[1, 2], [0, 3]])
    assert np.array_equal(M.matrix(), M.matrix().T)
    assert M.op_norm == pytest.approx(2 + np.sqrt(2))
    assert M.frobenius == pytest.approx(np.sqrt(12))
    assert M.quad([1, 1]) == pytest.approx(6)


def test_slice_derivative_examples():
    t = np.arange(-1, 1 + 1e-12, 0.01)
    assert slice_derivative(slice_from_values(t, 0.5 + 1.7 * t), 0.2) == pytest.approx(1.7, abs=1e-10)
    t = np.arange(-0.1, 0.1 + 1e-12, 1e-3)
    assert slice_derivative(slice_from_values(t, np.exp(2 * t)), 0.0) == pytest.approx(2, abs=1e-5)
    t = np.arange(-1, 1 + 1e-12, 0.01)
    s = slice_from_values(t, np.where(t > 0.3, 1.0, 0.0))
    with pytest.raises(DerivativeAtJumpError):
        slice_derivative(s, 0.3, analyze_slice(s).jumps)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.integers(0, 1000))
def test_solve_symmetric_exact_on_quadratic_data(c, seed):
    S0 = np.array([[c[0], c[1]], [c[1], c[2]]])
    W = np.random.default_rng(seed).standard_normal((12, 2))
    S, res, cond = solve_symmetric(W, np.einsum("ki,ij,kj->k", W, S0, W))
    assert np.max(np.abs(S.matrix() - S0)) <= 1e-10 * (1 + np.abs(S0).max())
    assert res >= 0 and cond >= 1


def test_solve_symmetric_failures():
    with pytest.raises(InsufficientDataError):
        solve_symmetric(np.eye(2), [1, 1])
    W = np.array([[1.0, 0], [2, 0], [3, 0], [-1, 0]])
    with pytest.raises(DirectionDegenerateError):
        solve_symmetric(W, np.ones(4))


@pytest.fixture(scope="module")
def flat_family():
    return build_family(Z, [0.5, 0.5], 0.3)


@pytest.fixture(scope="module")
def hyp_family():
    return build_family(H, [0, 1], 0.3)


def test_reconstruct_affine(flat_family):
    u = GridField.from_function(lambda X: X @ A.T, Box([-0.5, -0.5], [1.5, 1.5]), 1 / 32,
                                keep_analytic=True)
    rep = reconstruct_e(u, [0.5, 0.5], flat_family)
    assert np.max(np.abs(rep.e_of_u.matrix() - [[1, 1], [1, 3]])) <= 1e-8
    assert rep.residual <= 1e-8 and rep.directions_used >= 6
    W = np.array([[0.0, -1.3], [1.3, 0.0]])
    rigid = GridField.from_function(lambda X: X @ W.T + [2, -1], Box([-0.5, -0.5], [1.5, 1.5]),
                                    1 / 32, keep_analytic=True)
    assert np.max(np.abs(reconstruct_e(rigid, [0.5, 0.5], flat_family).e_of_u.matrix())) <= 1e-8


def test_reconstruct_hyperbolic_grid(hyp_family):
    u = GridField.from_function(lambda X: np.column_stack([0 * X[:, 0], X[:, 1]]),
                                Box([-1, 0.3], [1, 2]), 1 / 64)
    rep = reconstruct_e(u, [0, 1], hyp_family, use_analytic=False)
    oracle = hyperbolic_E_oracle([lambda a, b: 0 * a, lambda a, b: b], [0, 1])
    assert np.allclose(oracle, [[-1, 0], [0, 2]])
    E = rep.e_of_u.matrix()
    assert np.max(np.abs(E - oracle)) <= 0.02 * 2
    assert E[1, 1] == pytest.approx(2, rel=0.02)


def test_tilde_e_is_classical_symmetric_gradient(hyp_family):
    fn = lambda X: np.column_stack([np.sin(X[:, 0]) * X[:, 1], X[:, 1] ** 2 + 0.3 * X[:, 0]])
    u = GridField.from_function(fn, Box([-1, 0.3], [1, 2]), 1 / 32, keep_analytic=True)
    x = np.array([0.1, 1.05])
    rep = reconstruct_e(u, x, hyp_family)
    for z in default_probes(2):
        for zeta in z:
            # straight-line difference quotients give the approximate symmetric gradient
            assert rep.tilde_e(zeta) == pytest.approx(q_tilde(fn, x, zeta), abs=1e-5)
    const = GridField.from_function(lambda X: np.tile([0.0, 1.0], (len(X), 1)),
                                    Box([-1, 0.3], [1, 2]), 1 / 32, keep_analytic=True)
    rc = reconstruct_e(const, [0, 1], hyp_family)
    assert rc.e_of_u.quad([0, 1]) == pytest.approx(1, abs=1e-6)
    assert rc.tilde_e([0, 1]) == pytest.approx(0, abs=1e-6)


def test_tilde_e_flat_and_quadratic(flat_family):
    u = GridField.from_function(lambda X: X @ A.T, Box([-0.5, -0.5], [1.5, 1.5]), 1 / 32,
                                keep_analytic=True)
    rep = reconstruct_e(u, [0.5, 0.5], flat_family)
    assert tilde_e(rep, Z, rep.u_at_x, [0.3, -2]) == rep.e_of_u.quad([0.3, -2])
    q = lambda z: rep.tilde_e(z)
    assert parallelogram_defect(q, default_probes(2)) <= 1e-12


def test_analytic_E_examples():
    E = analytic_E(lambda x: A @ x, euclidean_chart(2), [0.3, 0.4], du=lambda x: A.T)
    assert np.allclose(E.matrix(), [[1, 1], [1, 3]], atol=1e-14)
    ch = hyperbolic_chart()
    assert np.allclose(analytic_E(lambda x: np.array([0.0, 1.0]), ch, [0, 1]).matrix(),
                       [[-1, 0], [0, 1]], atol=1e-8)
    assert np.allclose(analytic_E(lambda x: np.array([0.0, x[1]]), ch, [0, 1]).matrix(),
                       [[-1, 0], [0, 2]], atol=1e-8)
    fn = [lambda a, b: sp.sin(a) * b, lambda a, b: b ** 2 + a]
    x = [0.2, 1.3]
    got = analytic_E(lambda p: np.array([np.sin(p[0]) * p[1], p[1] ** 2 + p[0]]), ch, x).matrix()
    assert np.allclose(got, hyperbolic_E_oracle(fn, x), atol=1e-7)


def test_slice_identity():
    par = build_parametrization(H, [0, 1], [0, 1], 0.3, 1.0, 0.05)
    ch = hyperbolic_chart()
    u = lambda x: np.array([0.0, x[1]])
    assert slice_identity_check(u, ch, par, np.zeros(2), 0.5) <= 1e-5
    parf = build_parametrization(Z, [0, 0], [0.6, 0.8], 0.5, 0.5, 0.1)
    assert slice_identity_check(lambda x: A @ x, euclidean_chart(2), parf, np.zeros(2), 0.2) <= 1e-8
    g = lambda x: np.array([np.sin(x[0]) * x[1], x[1] ** 2])
    park = build_parametrization(H, [0, 1], [0.6, 0.8], 0.3, 0.5, 0.05)
    r1 = slice_identity_check(g, ch, park, np.zeros(2), 0.2, h_t=1e-2)
    r2 = slice_identity_check(g, ch, park, np.zeros(2), 0.2, h_t=5e-3)
    assert r1 / r2 >= 3


def test_parallelogram_examples():
    assert parallelogram_residual(lambda X: X @ A.T + 1, [0.2, 0.1]) <= 1e-9
    assert parallelogram_residual(lambda X: np.column_stack([X[:, 0] ** 2, 0 * X[:, 0]]), [0, 0]) <= 1e-6
    assert parallelogram_defect(lambda z: abs(z[0]) ** 3, default_probes(2)) > 0.1


def test_bounds_affine():
    u = GridField.from_function(lambda X: X @ A.T, Box([-0.25, -0.25], [1.25, 1.25]), 1 / 32,
                                keep_analytic=True)
    rep = bound_checks(u, Z, Box([0, 0], [1, 1]), cells=1)
    assert rep.integral_op == pytest.approx(2 + np.sqrt(2), rel=1e-6)
    assert rep.integral_frob == pytest.approx(np.sqrt(12), rel=1e-6)
    assert rep.certificate and rep.slope_violation_rate <= 0.01
    assert rep.integral_op <= rep.lam * 1.1 and rep.lam <= rep.integral_op * 1.1


def test_bounds_constant_field():
    u = GridField.from_function(lambda X: np.tile([0.4, -0.2], (len(X), 1)),
                                Box([-0.25, -0.25], [1.25, 1.25]), 1 / 32, keep_analytic=True)
    rep = bound_checks(u, Z, Box([0, 0], [1, 1]), cells=1)
    assert rep.integral_op == pytest.approx(0, abs=1e-9) and rep.lam == pytest.approx(0, abs=1e-9)


def test_shell_flat_profile():
    B = np.array([[1.0, 2.0, 0.5], [0.0, 3.0, -1.0], [0.2, 0.1, 4.0]])
    pts = np.array([[0.1, 0.2, 0.0], [-0.3, 0.4, 0.5]])
    g = shell_egradient(lambda X: X @ B.T, 0.1, QuadraticSurface(), pts)
    S = 0.5 * (B + B.T)
    assert np.allclose(g.e_ab, S[:2, :2], atol=1e-8)
    assert np.allclose(g.e_33, B[2, 2] / 0.01, rtol=1e-8)
    assert np.allclose(g.e_a3, S[:2, 2] / 0.1, rtol=1e-8)
    with pytest.raises(ValueError):
        shell_egradient(lambda X: X, 0.0, QuadraticSurface(), pts)


def test_shell_paraboloid_constant_normal():
    th = QuadraticSurface(np.eye(2))
    pts = np.array([[0.3, -0.4, 0.0]])
    for rho in (1.0, 0.1, 0.01):
        g = shell_egradient(lambda X: np.tile([0, 0, 1.0], (len(X), 1)), rho, th, pts)
        assert g.e_ab[0, 0, 0] == pytest.approx(1 / np.sqrt(1 + rho ** 2 * 0.25), rel=1e-9)


def test_shell_sweep_converges():
    th = QuadraticSurface([[1.0, 0.3], [0.3, -0.5]], [0.2, 0.1])
    u = lambda X: np.column_stack([np.sin(X[:, 0]), X[:, 0] * X[:, 1], 1 + X[:, 1] ** 2])
    pts = np.array([[0.1, 0.2, 0.3], [-0.2, 0.1, -0.4]])
    lim = shell_limit(u, th, pts)
    d = [np.max(np.abs(shell_egradient(u, r, th, pts).e_ab - lim)) for r in (1.0, 0.1, 0.01)]
    assert d[0] > d[1] > d[2]
    assert d[2] <= 0.01 * d[0] + 1e-9
