import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curvislice.bv1d import (JumpField, Plane, Sphere, UndersampledError, analyze_slice,
                             eta_xi, integral_geometric, jump_slicing_check, lsc_probe, mu_xi_u,
                             rigid_seminorm, simplex_vertices, slice_from_values,
                             surface_crossings, truncated_variation, truncation)
from curvislice.field import Box, christoffel_field, hyperbolic_chart, zero_field
from curvislice.gridfield import GridField, extract_slices
from curvislice.projections import CurvilinearProjection, build_family, build_parametrization

Z = zero_field(2, Box([-3, -3], [4, 4]))
H = christoffel_field(hyperbolic_chart())
T = np.arange(-1, 1 + 1e-9, 1 / 128)
UNIT = Box([0, 0], [1, 1])


def step(at, amp):
    return np.where(T >= at, amp, 0.0)


def pointwise_variation(v):
    """Brute-force oracle under the unit-atom convention for jumps above 1."""
    d = np.abs(np.diff(v))
    return float(np.where(d > 1, 1.0, d).sum())


def test_constant_slice():
    an = analyze_slice(slice_from_values(T, np.full(T.size, 0.7)))
    assert an.jumps == [] and an.variation == 0 and an.measure.total == 0


@pytest.mark.parametrize("amp", [0.5, 2.0])
def test_single_jump_measure(amp):
    an = analyze_slice(slice_from_values(T, step(0.3, amp)))
    (j,) = an.jumps
    assert j.amplitude == pytest.approx(amp, abs=1e-12)
    assert abs(j.t_jump - 0.3) <= 1 / 128
    assert an.measure.total == pytest.approx(pointwise_variation(step(0.3, amp)), abs=1e-12)
    assert an.measure.atoms.size == (1 if amp > 1 else 0)


def test_traces_are_one_sided_values():
    (j,) = analyze_slice(slice_from_values(T, 0.2 + step(-0.1, -1.5))).jumps
    assert j.left_value == pytest.approx(0.2) and j.right_value == pytest.approx(-1.3)


@pytest.mark.parametrize("sig", [
    np.exp(2 * T) + step(0.0, 0.3),
    np.sin(3 * T) + step(-0.2, 2.0) - step(0.5, 0.7),
    np.cos(T) - step(0.4, 3.0),
])
def test_decomposition(sig):
    an = analyze_slice(slice_from_values(T, sig))
    assert an.decomposition_residual() <= 1e-9
    assert an.variation == pytest.approx(np.abs(np.diff(sig)).sum(), abs=1e-12)


def test_detector_is_deterministic():
    sig = np.sin(3 * T) + step(-0.2, 2.0)
    a = analyze_slice(slice_from_values(T, sig))
    b = analyze_slice(slice_from_values(T, sig.copy()))
    assert [(j.t_jump, j.left_value, j.right_value) for j in a.jumps] == \
        [(j.t_jump, j.left_value, j.right_value) for j in b.jumps]


def test_undersampled():
    s = slice_from_values(np.linspace(0, 1, 5), np.arange(5.0))
    with pytest.raises(UndersampledError):
        analyze_slice(s)
    assert analyze_slice(s, strict=False).variation == pytest.approx(4.0)


def test_truncated_variation():
    assert truncated_variation(slice_from_values(T, np.full(T.size, 3.0))) == 0
    s = slice_from_values(T, step(0.3, 1.0))
    assert truncated_variation(s) == pytest.approx(np.arctan(np.pi) / np.pi, abs=1e-15)


@pytest.mark.parametrize("amp", [0.4, 1.0, 3.0])
def test_truncated_variation_below_slice_measure(amp):
    s = slice_from_values(T, np.sin(2 * T) + step(0.1, amp))
    mu = analyze_slice(s).measure.total
    assert max(truncated_variation(s, truncation(a)) for a in np.linspace(-4, 4, 161)) <= mu + 1e-12


def test_mu_affine_field():
    A = np.array([[1.5, 2.0], [0.0, 3.0]])
    u = GridField.from_function(lambda X: X @ A.T, UNIT, 1 / 32)
    p = CurvilinearProjection(build_parametrization(Z, [0.5, 0.5], [1, 0], 0.75, 0.75, 0.1))
    assert mu_xi_u(u, p) == pytest.approx(1.5, rel=1e-9)
    assert mu_xi_u(u, p, region=lambda X: np.zeros(len(X), bool)) == 0


def planar_jump(amp):
    return GridField.from_function(lambda X: np.where(X[:, :1] > 0.5, [amp, 0.0], [0.0, 0.0]),
                                   UNIT, 1 / 64)


def test_mu_counts_one_atom_per_slice():
    p = CurvilinearProjection(build_parametrization(Z, [0.5, 0.5], [1, 0], 0.75, 0.75, 0.1))
    assert mu_xi_u(planar_jump(2.0), p) == pytest.approx(1.0, rel=1e-9)


def test_eta_examples():
    u = planar_jump(2.0)
    p1 = CurvilinearProjection(build_parametrization(Z, [0.5, 0.5], [1, 0], 0.75, 0.75, 0.1))
    assert eta_xi(u, p1) == pytest.approx(1.0, rel=1e-9)
    assert eta_xi(GridField.from_function(lambda X: X, UNIT, 1 / 32), p1) == 0
    d = np.array([1.0, 1.0]) / np.sqrt(2)
    pd = CurvilinearProjection(build_parametrization(Z, [0.5, 0.5], d, 0.75, 0.75, 0.1))
    # brute-force slice counting: a line y + t d crosses the segment iff its
    # crossing point has x2 in (0, 1); each crossing has amplitude sqrt2 -> 1
    hy = u.h / 2
    c = (np.arange(-int(0.75 / hy), int(0.75 / hy)) + 0.5) * hy
    e = np.array([-d[1], d[0]])
    Y = 0.5 + c[:, None] * e
    tcross = (0.5 - Y[:, 0]) / d[0]
    x2 = Y[:, 1] + tcross * d[1]
    brute = hy * np.count_nonzero((x2 > 0) & (x2 < 1))
    assert eta_xi(u, pd) == pytest.approx(brute, rel=0.02)
    assert brute == pytest.approx(np.sqrt(2) / 2, rel=0.01)


def test_eta_below_jump_part_of_mu():
    u = GridField.from_function(lambda X: np.where(X[:, :1] > 0.5, [0.6, 0.0], [0.0, 0.0]),
                                UNIT, 1 / 64)
    p = CurvilinearProjection(build_parametrization(Z, [0.5, 0.5], [0.8, 0.6], 0.75, 0.75, 0.1))
    assert eta_xi(u, p) <= mu_xi_u(u, p) + 1e-12


@pytest.fixture(scope="module")
def flat_family():
    return build_family(Z, [0.5, 0.5], 0.75, 16)


def test_integral_geometric_brute_force(flat_family):
    u = planar_jump(1.0)
    ig = integral_geometric(u, flat_family)
    th = np.linspace(0, 2 * np.pi, 20001)[:-1]
    oracle = 2 * np.pi * np.mean(np.minimum(np.abs(np.cos(th)), 1) * np.abs(np.cos(th)))
    assert ig == pytest.approx(oracle, rel=0.02)


def test_integral_geometric_monotone_and_smooth(flat_family):
    u = planar_jump(2.0)
    small = integral_geometric(u, flat_family, region=Box([0.2, 0.2], [0.8, 0.8]))
    big = integral_geometric(u, flat_family)
    assert 0 < small <= big
    smooth = GridField.from_function(lambda X: np.column_stack([np.sin(X[:, 0]), X[:, 1] ** 2]),
                                     UNIT, 1 / 32)
    assert integral_geometric(smooth, flat_family) == 0


def test_slicing_plane_flat():
    jf = JumpField(Plane([1, 0], 0.3), lambda X: np.tile([1.0, 0], (len(X), 1)),
                   lambda X: np.zeros((len(X), 2)))
    u = jf.grid(Box([-1, -1], [1, 1]), 1 / 32)
    par = build_parametrization(Z, [0, 0], [1, 0], 0.5, 0.9, 0.05)
    Y = np.array([[0, c] for c in (-0.3, 0.0, 0.2)])
    sl = extract_slices(u, par, Y, 1 / 64)
    cr = surface_crossings(par, jf.surface, sl)
    assert len(cr) == 3 and all(abs(t - 0.3) <= 1e-12 for _, t, *_ in cr)
    for s in sl:
        (j,) = analyze_slice(s).jumps
        assert abs(j.t_jump - 0.3) <= u.h
        assert {round(j.left_value, 9), round(j.right_value, 9)} == {0.0, 1.0}


def test_slicing_circle_chords():
    jf = JumpField(Sphere([0, 0], 0.5), lambda X: np.zeros((len(X), 2)),
                   lambda X: np.tile([1.0, 0.0], (len(X), 1)))
    u = jf.grid(Box([-1, -1], [1, 1]), 1 / 64)
    par = build_parametrization(Z, [0, 0], [1, 0], 0.8, 0.9, 0.05)
    heights = np.array([-0.35, 0.0, 0.2, 0.45])
    sl = extract_slices(u, par, np.column_stack([0 * heights, heights]), 1 / 128)
    cr = surface_crossings(par, jf.surface, sl)
    for k, hgt in enumerate(heights):
        ts = sorted(t for si, t, *_ in cr if si == k)
        half = np.sqrt(0.25 - hgt ** 2)
        assert np.allclose(ts, [-half, half], atol=1e-10)
        det = sorted(j.t_jump for j in analyze_slice(sl[k]).jumps)
        assert len(det) == 2 and np.allclose(det, [-half, half], atol=2 * u.h / max(half / 0.5, 0.3))


def test_hyperbolic_vertical_crossing():
    jf = JumpField(Plane([0, 1], 2.0), lambda X: np.tile([0.0, 1.0], (len(X), 1)),
                   lambda X: np.zeros((len(X), 2)))
    par = build_parametrization(H, [0, 1], [0, 1], 0.2, 1.0, 0.05)
    u = GridField.from_function(jf, Box([-1, 0.3], [1, 3]), 1 / 32, keep_analytic=True)
    sl = extract_slices(u, par, np.array([[0.0, 0.0], [0.1, 0.0]]), 1 / 64)
    cr = surface_crossings(par, jf.surface, sl)
    assert abs(cr[0][1] - np.log(2)) <= 1e-9


def test_jump_slicing_report():
    jf = JumpField(Sphere([0, 0], 0.5), lambda X: np.tile([0.5, -1.0], (len(X), 1)),
                   lambda X: np.column_stack([X[:, 0], 1 + 0 * X[:, 1]]), lipschitz=1.0)
    u = jf.grid(Box([-1, -1], [1, 1]), 1 / 64)
    fam = build_family(Z, [0, 0], 0.45, 8)
    rep = jump_slicing_check(u, jf, fam, 40, seed=1)
    assert rep.precision >= 0.95 and rep.recall >= 0.95 and rep.n_transversal > 0
    assert rep.max_position_error <= np.sqrt(2) * u.h
    again = jump_slicing_check(u, jf, fam, 40, seed=1)
    assert again.to_dict() == rep.to_dict()


def test_rigid_seminorm_examples():
    V = simplex_vertices([0, 0], 2)
    skew = np.array([[0.0, 1.0], [-1.0, 0.0]])
    assert rigid_seminorm(Z, [0, 0], 1.0, [0, 0], [0.4, -1] + V @ skew.T) <= 1e-12
    w = np.array([[0, 0], [1, 0], [0, 1.0]]) + [0.3, 0.7]
    assert rigid_seminorm(Z, [0, 0], 1.0, [0, 0], w) == pytest.approx(2 + np.sqrt(2), abs=1e-9)
    with pytest.raises(ValueError):
        rigid_seminorm(Z, [0, 0], 1.0, [0, 0], np.zeros((2, 2)))


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6), st.floats(0.1, 10))
def test_rigid_seminorm_homogeneous(vals, lam):
    w = np.reshape(vals, (3, 2))
    e = rigid_seminorm(H, [0, 1], 0.1, [0, 0], w)
    assert rigid_seminorm(H, [0, 1], 0.1, [0, 0], lam * w) == pytest.approx(lam * e, abs=1e-12 * (1 + lam * e))


def test_lsc_probe_planar_jump():
    rep = lsc_probe(planar_jump(2.0), Z, [0.5, 0.5], [1.0, 0.0], Box([0.1, 0.1], [0.9, 0.9]), 0.75)
    assert rep.passed and rep.passed_liminf
    assert len(rep.mu_sequence) == 5
