import numpy as np
import pytest

from curvislice.bv1d import Plane, jump_slicing_check
from curvislice.field import Box, christoffel_field
from curvislice.gridfield import GridField
from curvislice.manifold import (OneForm, chart_lipschitz, e_omega, e_omega_norm,
                                 field_to_oneform, flat_chart, halfplane_chart,
                                 manifold_gradient_bound, manifold_slice, oneform_jump_field,
                                 oneform_to_field, pairing_slice, speed_drift,
                                 stereographic_chart)
from curvislice.projections import build_family, build_parametrization
from curvislice.symgrad import SymMatrix, reconstruct_e

HP = halfplane_chart()
ST = stereographic_chart()
HBOX = Box([-1.5, 0.3], [1.5, 2.5])
dx2 = OneForm(lambda P: np.column_stack([0 * P[:, 0], np.ones(len(P))]))
x2dx2 = OneForm(lambda P: np.column_stack([0 * P[:, 0], P[:, 1]]))


def test_charts_round_trip():
    X = np.random.default_rng(0).uniform(-0.8, 0.8, size=(50, 2))
    assert ST.round_trip_error(X) <= 1e-12
    assert HP.round_trip_error(X + [0, 1.5]) == 0
    P = ST.psi_inv(X)
    assert np.allclose(np.linalg.norm(P, axis=1), 1, atol=1e-14)


def test_tangent_basis_gram_is_metric():
    X = np.array([[0.3, -0.2], [0.1, 0.5]])
    G = ST.tangent_basis(X)
    gram = np.einsum("kia,kja->kij", G, G)
    assert np.allclose(gram, ST.metric.g(X), atol=1e-8)


def test_bridge_examples():
    u = oneform_to_field(dx2, HP, HBOX, 0.1)
    X = np.array([[0.2, 1.0], [-0.4, 2.2]])
    assert np.allclose(u.evaluate(X), [[0, 1], [0, 1]])
    u2 = oneform_to_field(x2dx2, HP, HBOX, 0.1)
    assert np.allclose(u2.evaluate(X), [[0, 1.0], [0, 2.2]])
    back = oneform_to_field(field_to_oneform(u2, HP), HP, HBOX, 0.1)
    assert np.array_equal(back.values, u2.values)
    g = GridField.from_function(lambda X: X ** 2, HBOX, 0.1)
    assert oneform_to_field(field_to_oneform(g, HP), HP) is g
    with pytest.raises(ValueError):
        oneform_to_field(dx2, flat_chart(2))


def test_manifold_slice_vertical_geodesic():
    par = build_parametrization(christoffel_field(HP.metric), [0, 1], [0, 1], 0.3, 0.8, 0.05)
    s = manifold_slice(dx2, HP, par, np.zeros(2), 0.01, box=HBOX)
    ok = s.mask
    assert np.allclose(s.values[ok], np.exp(s.t[ok]), rtol=1e-8)
    zero = OneForm(lambda P: np.zeros((len(P), 2)))
    assert np.all(manifold_slice(zero, HP, par, np.zeros(2), 0.01, box=HBOX).values[ok] == 0)


@pytest.mark.parametrize("chart,x0,box", [
    (HP, [0.1, 1.2], HBOX),
    (ST, [0.2, 0.1], Box([-1.5, -1.5], [1.5, 1.5])),
])
def test_pairing_agrees_with_bridge(chart, x0, box):
    form = OneForm(lambda P: np.column_stack([np.sin(P[:, 0]) + P[:, -1], P[:, 0] * P[:, 1]]))
    par = build_parametrization(christoffel_field(chart.metric), x0, [0.6, 0.8], 0.3, 0.6, 0.05)
    for a in (-0.2, 0.0, 0.15):
        y = a * np.array([-0.8, 0.6])
        v1 = manifold_slice(form, chart, par, y, 0.01, box=box).values
        v2 = pairing_slice(form, chart, par, y, 0.01)
        ok = np.isfinite(v1) & np.isfinite(v2)
        assert ok.sum() > 50
        assert np.max(np.abs(v1[ok] - v2[ok])) <= 1e-9


def test_e_omega_examples():
    E = SymMatrix.from_matrix([[-1.0, 0.3], [0.3, 2.0]])
    assert e_omega_norm(E, np.eye(2)) == pytest.approx(np.max(np.abs(np.linalg.eigvalsh(E.matrix()))))
    g = HP.metric.g(np.array([[0.0, 2.0]]))[0]
    assert np.allclose(g, np.eye(2) / 4)
    assert e_omega_norm(E, g) == pytest.approx(4 * e_omega_norm(E, np.eye(2)), rel=1e-12)
    # brute force over unit circle of the Riemannian norm
    th = np.linspace(0, np.pi, 20001)
    V = np.column_stack([np.cos(th), np.sin(th)])
    q = np.abs(np.einsum("ki,ij,kj->k", V, E.matrix(), V)) / np.einsum("ki,ij,kj->k", V, g, V)
    assert e_omega_norm(E, g) == pytest.approx(q.max(), rel=1e-6)


def test_e_omega_reads_chart_components():
    F = christoffel_field(HP.metric)
    fam = build_family(F, [0, 1], 0.3)
    u = oneform_to_field(x2dx2, HP, HBOX, 1 / 32)
    rep = reconstruct_e(u, [0, 1], fam)
    for v in ([1, 0], [0, 1], [0.6, -0.8]):
        assert e_omega(rep, HP, v) == pytest.approx(rep.e_of_u.quad(v))
    assert e_omega(rep, HP, [0, 1]) == pytest.approx(2, abs=1e-5)


def test_chart_lipschitz():
    lp, lpi = chart_lipschitz(HP, Box([-0.1, 0.9], [0.1, 1.1]))
    assert lp == pytest.approx(1.1) and lpi == pytest.approx(1 / 0.9)
    assert chart_lipschitz(flat_chart(2), Box([0, 0], [1, 1])) == (1.0, 1.0)


def test_zero_form_bound():
    zero = OneForm(lambda P: np.zeros((len(P), 2)))
    rep = manifold_gradient_bound(zero, HP, Box([-0.05, 0.95], [0.05, 1.05]))
    assert rep.integral == 0 and rep.lam_chart == 0 and rep.certificate


def test_shrinking_charts():
    ratios = []
    for eps in (0.1, 0.05, 0.01):
        rep = manifold_gradient_bound(x2dx2, HP, Box([-eps, 1 - eps], [eps, 1 + eps]))
        assert rep.certificate
        ratios.append(rep.ratio)
    assert ratios[0] > ratios[1] > ratios[2]
    assert ratios[2] <= (1.01) ** 3 * 1.05


def test_speed_is_conserved():
    assert speed_drift(HP, [0, 1], [1, 0.5]) <= 1e-7
    assert speed_drift(ST, [0.3, 0], [0.2, 1]) <= 1e-7


def test_jump_slicing_through_bridge():
    plus = OneForm(lambda P: np.column_stack([np.ones(len(P)), P[:, 1]]))
    minus = OneForm(lambda P: np.zeros((len(P), 2)))
    jf = oneform_jump_field(HP, Plane([1, 0.3], 0.05), plus, minus, lipschitz=1.0)
    u = jf.grid(Box([-0.7, 0.4], [0.7, 1.8]), 1 / 64)
    fam = build_family(christoffel_field(HP.metric), [0, 1.1], 0.25, 8)
    rep = jump_slicing_check(u, jf, fam, 40, seed=2)
    assert rep.n_transversal > 0 and rep.precision >= 0.95 and rep.recall >= 0.95
