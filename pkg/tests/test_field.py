import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from curvislice.field import (Box, MetricChart, MetricDegenerateError, OutOfDomainError,
                              QuadraticSurface, christoffel_field, christoffel_symbols,
                              euclidean_chart, eval_field, field_from_config, fq_contract,
                              halfspace_chart, hyperbolic_chart, rescale_field,
                              shallow_shell_field, sphere_chart, tensor_field, zero_field)


def sympy_christoffel(g_expr, coords, point):
    """Christoffel symbols Gamma[l, i, j] by symbolic differentiation."""
    n = len(coords)
    g = sp.Matrix(g_expr)
    ginv = g.inv()
    out = np.zeros((n, n, n))
    subs = dict(zip(coords, point))
    for l in range(n):
        for i in range(n):
            for j in range(n):
                expr = sum(ginv[l, m] * (sp.diff(g[m, j], coords[i]) + sp.diff(g[m, i], coords[j])
                                         - sp.diff(g[i, j], coords[m])) for m in range(n)) / 2
                out[l, i, j] = float(expr.subs(subs))
    return out


x1, x2 = sp.symbols("x1 x2", real=True)
HYP = [[1 / x2 ** 2, 0], [0, 1 / x2 ** 2]]
SPH = [[4 / (1 + x1 ** 2 + x2 ** 2) ** 2, 0], [0, 4 / (1 + x1 ** 2 + x2 ** 2) ** 2]]
GENERAL = [[1 + x1 ** 2, x1 * x2], [x1 * x2, 2 + sp.sin(x2)]]


def general_chart(mode="finite-difference"):
    def g(x):
        x = np.asarray(x, dtype=float)
        a, b = x[..., 0], x[..., 1]
        return np.stack([np.stack([1 + a * a, a * b], -1), np.stack([a * b, 2 + np.sin(b)], -1)], -2)

    return MetricChart(2, g, None, mode, 1e-5, Box([-1, -1], [1, 1]), "general")


def test_zero_field_vanishes(rng):
    F = zero_field(3)
    for _ in range(5):
        assert np.array_equal(F(rng.normal(size=3), rng.normal(size=3)), np.zeros(3))
    assert fq_contract(F, np.zeros(3), *rng.normal(size=(3, 3))) == 0.0


def test_hyperbolic_field_values():
    F = christoffel_field(hyperbolic_chart())
    assert np.allclose(F([0, 1], [0, 1]), [0, 1], atol=1e-15)
    assert np.allclose(F([0, 1], [1, 0]), [0, -1], atol=1e-15)
    assert fq_contract(F, [0, 1], [1, 0], [0, 1], [1, 0]) == pytest.approx(1.0, abs=1e-14)


@pytest.mark.parametrize("metric,chart,point", [
    (HYP, hyperbolic_chart(), (0.0, 1.0)),
    (HYP, hyperbolic_chart(), (0.3, 0.8)),
    (SPH, sphere_chart(), (0.4, -0.7)),
])
def test_christoffel_matches_symbolic(metric, chart, point):
    exact = sympy_christoffel(metric, (x1, x2), point)
    assert np.allclose(christoffel_symbols(chart, np.array(point)), exact, atol=1e-12)
    # closed-form conformal fast path gives the field -sym(Gamma)
    F = christoffel_field(chart)
    assert np.allclose(F.G(np.array(point)), -exact, atol=1e-12)


def test_hyperbolic_symbols_at_base():
    G = christoffel_symbols(hyperbolic_chart(), np.array([0.0, 1.0]))
    assert (G[0, 0, 1], G[1, 0, 0], G[1, 1, 1]) == pytest.approx((-1, 1, -1), abs=1e-14)


def test_general_metric_finite_difference_matches_symbolic():
    p = (0.3, -0.4)
    exact = sympy_christoffel(GENERAL, (x1, x2), p)
    assert np.allclose(christoffel_symbols(general_chart(), np.array(p)), exact, atol=1e-8)


def test_finite_difference_mode_matches_analytic():
    ch = hyperbolic_chart()
    x = np.array([0.3, 0.8])
    fd = christoffel_symbols(ch.with_mode("finite-difference", 1e-4), x)
    assert np.max(np.abs(fd - christoffel_symbols(ch, x))) <= 1e-7


def test_euclidean_metric_gives_zero_field(rng):
    F = christoffel_field(euclidean_chart(3))
    assert np.allclose(F(rng.normal(size=3), rng.normal(size=3)), 0.0)


def test_degenerate_metric_rejected():
    bad = MetricChart(2, lambda x: np.broadcast_to(np.diag([1.0, -1.0]), np.shape(x)[:-1] + (2, 2)),
                      lambda x: np.zeros(np.shape(x)[:-1] + (2, 2, 2)))
    with pytest.raises(MetricDegenerateError):
        christoffel_symbols(bad, np.zeros(2))


def test_domain_checked():
    F = christoffel_field(hyperbolic_chart())
    with pytest.raises(OutOfDomainError):
        F([0, -1], [1, 0])
    with pytest.raises(ValueError):
        hyperbolic_chart(Box([-1, -1], [1, 1]))


def test_shell_field_examples():
    Z = shallow_shell_field(hessian=lambda xp: np.zeros(np.shape(xp)[:-1] + (2, 2)))
    assert np.allclose(Z([0.1, 0.2, 0.3], [1, 2, 3]), 0.0)
    bowl = QuadraticSurface(np.eye(2))
    F = shallow_shell_field(bowl, bowl.hessian)
    assert F([0.2, 0.1, 0.0], [1, 0, 0])[2] == pytest.approx(-1.0)
    saddle = shallow_shell_field(lambda xp: xp[..., 0] * xp[..., 1])
    assert saddle([0.2, 0.1, 0.0], [1, 1, 0])[2] == pytest.approx(-2.0, abs=1e-6)


def test_rescale_field_examples():
    F = christoffel_field(hyperbolic_chart())
    assert np.allclose(rescale_field(F, 0.5, [0, 1])([0, 0], [0, 1]), [0, 0.5])
    assert np.allclose(rescale_field(zero_field(2), 0.1, [0, 0])([1, 1], [1, 2]), 0.0)
    z, v = np.array([0.3, -0.2]), np.array([0.6, 0.8])
    rs = np.array([0.1, 0.05, 0.025])
    vals = [np.linalg.norm(rescale_field(F, r, [0, 1])(z, v)) for r in rs]
    slope = np.polyfit(rs, vals, 1)[0]
    assert slope == pytest.approx(np.linalg.norm(F([0, 1], v)), rel=0.05)
    with pytest.raises(ValueError):
        rescale_field(F, 0.0, [0, 1])


def test_tensor_callback_symmetrized(rng):
    raw = rng.normal(size=(2, 2, 2))
    F = tensor_field(lambda x: np.broadcast_to(raw, np.shape(x)[:-1] + raw.shape), 2)
    G = F.G(np.zeros(2))
    assert np.allclose(G, np.swapaxes(G, -1, -2))
    Fs = tensor_field(lambda p: raw, 2, vectorized=False)
    assert np.allclose(Fs.G(np.zeros((3, 2))), G)


def test_field_from_config_kinds():
    F, chart = field_from_config({"dim": 2, "kind": "christoffel", "metric": "sphere-chart"})
    assert chart.name == "sphere-chart"
    Z, none = field_from_config({"dim": 2, "kind": "zero"})
    assert Z.is_zero and none is None
    T, _ = field_from_config({"dim": 2, "kind": "tensor", "builtin": "hyperbolic-halfplane"})
    assert np.allclose(T([0, 1], [1, 0]), [0, -1])
    S, _ = field_from_config({"dim": 3, "kind": "shell", "A": [[1, 0], [0, 1]]})
    assert S([0, 0, 0], [1, 0, 0])[2] == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        field_from_config({"dim": 2, "kind": "nonsense"})


def test_halfspace_reduces_to_halfplane():
    x = np.array([0.3, 1.2])
    assert np.allclose(christoffel_symbols(halfspace_chart(2), x),
                       christoffel_symbols(hyperbolic_chart(), x))


FIELDS = [christoffel_field(hyperbolic_chart()), christoffel_field(sphere_chart()),
          christoffel_field(general_chart())]
vec = st.lists(st.floats(-3, 3), min_size=2, max_size=2)
pt = st.tuples(st.floats(-0.9, 0.9), st.floats(0.3, 0.9))


@settings(max_examples=100, deadline=None)
@given(k=st.integers(0, 2), x=pt, v1=vec, v2=vec, s=st.floats(-4, 4))
def test_quadratic_identity_and_homogeneity(k, x, v1, v2, s):
    F = FIELDS[k]
    x, v1, v2 = np.array(x), np.array(v1), np.array(v2)
    norm = max(1.0, float(np.max(np.abs(F.G(x)))))
    res = F(x, v1 + v2) + F(x, v1 - v2) - 2 * F(x, v1) - 2 * F(x, v2)
    assert np.max(np.abs(res)) <= 1e-12 * max(1.0, v1 @ v1 + v2 @ v2) * norm * 10
    assert np.allclose(F(x, s * v1), s * s * F(x, v1), rtol=1e-12, atol=1e-12 * norm)


@settings(max_examples=100, deadline=None)
@given(x=pt, v1=vec, v2=vec, v3=vec, w=vec, a=st.floats(-2, 2))
def test_fq_contract_symmetric_and_linear(x, v1, v2, v3, w, a):
    F = FIELDS[0]
    x = np.array(x)
    assert fq_contract(F, x, v1, v2, v3) == pytest.approx(fq_contract(F, x, v2, v1, v3), abs=1e-10)
    lhs = fq_contract(F, x, v1, v2, np.add(v3, np.multiply(a, w)))
    rhs = fq_contract(F, x, v1, v2, v3) + a * fq_contract(F, x, v1, v2, w)
    assert lhs == pytest.approx(rhs, abs=1e-9)


def test_eval_field_dimension_mismatch():
    with pytest.raises(ValueError):
        eval_field(zero_field(2), [0, 0], [1, 2, 3])
