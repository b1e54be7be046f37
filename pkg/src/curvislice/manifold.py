"""One-forms on a Riemannian chart and their bridge to vector fields.

A chart carries the coordinate map, its inverse and the metric in
coordinates. The covariant components of a one-form, read as a Euclidean
vector field on the chart image, slice along coordinate geodesics exactly as
the form pairs with geodesic velocities. The pushforward gradient of the
form is the reconstructed symmetric matrix read through the metric.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .bv1d import JumpField
from .field import (Box, MetricChart, christoffel_field, euclidean_chart, hyperbolic_chart,
                    sphere_chart)
from .geodesics import DEFAULT_SETTINGS, ODESettings, integrate
from .gridfield import GridField, Slice1D, extract_slice, slice_times
from .symgrad import (GradientReport, LambdaEstimate, SymMatrix, _midpoints, lambda_estimate,
                      reconstruct_e_batch)


@dataclass(frozen=True)
class Chart:
    """Coordinate chart ``psi: U -> R^n`` of a Riemannian manifold.

    Manifold points are ambient coordinate vectors. ``ambient_metric``
    gives the inner product of ambient tangent vectors at a point (None for
    the Euclidean product of an isometric embedding).
    """

    psi: Callable
    psi_inv: Callable
    metric: MetricChart
    ambient_metric: Optional[Callable] = None
    name: str = "chart"

    @property
    def dim(self) -> int:
        return self.metric.dim

    @property
    def domain(self) -> Optional[Box]:
        return self.metric.domain

    def tangent_basis(self, x, h: float = 1e-6) -> np.ndarray:
        """Ambient coordinate vectors ``g_i`` at ``psi^{-1}(x)``, shape ``(k, n, N)``."""
        X = np.array(x, dtype=float, ndmin=2)
        cols = []
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = h
            cols.append((self.psi_inv(X + e) - self.psi_inv(X - e)) / (2 * h))
        return np.stack(cols, axis=1)

    def inner(self, P, a, b) -> np.ndarray:
        """Inner products of ambient tangent vectors ``a``, ``b`` at points ``P``."""
        if self.ambient_metric is None:
            return np.einsum("ki,ki->k", a, b)
        return np.einsum("ki,kij,kj->k", a, self.ambient_metric(P), b)

    def round_trip_error(self, X) -> float:
        X = np.array(X, dtype=float, ndmin=2)
        return float(np.max(np.abs(self.psi(self.psi_inv(X)) - X)))


def halfplane_chart(domain: Optional[Box] = None) -> Chart:
    """Upper half-plane model; the coordinates are the points themselves."""
    metric = hyperbolic_chart(domain)
    ident = lambda X: np.array(X, dtype=float, ndmin=2)
    return Chart(ident, ident, metric, lambda P: metric.g(P), "hyperbolic-halfplane")


def stereographic_chart(domain: Optional[Box] = None) -> Chart:
    """Unit sphere in R^3 through stereographic projection from the north pole."""
    metric = sphere_chart(domain)

    def psi(P):
        P = np.array(P, dtype=float, ndmin=2)
        return P[:, :2] / (1.0 - P[:, 2:3])

    def psi_inv(X):
        X = np.array(X, dtype=float, ndmin=2)
        r2 = np.sum(X * X, axis=1, keepdims=True)
        return np.column_stack([2 * X, r2 - 1.0]) / (1.0 + r2)

    return Chart(psi, psi_inv, metric, None, "sphere-stereographic")


def flat_chart(dim: int, domain: Optional[Box] = None) -> Chart:
    ident = lambda X: np.array(X, dtype=float, ndmin=2)
    return Chart(ident, ident, euclidean_chart(dim, domain), None, "euclidean")


# --------------------------------------------------------------- one-forms

@dataclass
class OneForm:
    """Covariant components ``omega_i`` of a one-form.

    ``components`` maps manifold points ``(k, N)`` to ``(k, n)``; a GridField
    instead holds the components on the chart image directly.
    """

    components: object

    def at_chart_points(self, chart: Chart, X) -> np.ndarray:
        X = np.array(X, dtype=float, ndmin=2)
        if isinstance(self.components, GridField):
            return self.components.evaluate(X)
        out = np.full((X.shape[0], chart.dim), np.nan)
        fin = np.all(np.isfinite(X), axis=1)
        if fin.any():
            out[fin] = np.asarray(self.components(chart.psi_inv(X[fin])), dtype=float)
        return out


def oneform_to_field(omega: OneForm, chart: Chart, box: Optional[Box] = None,
                     h: Optional[float] = None) -> GridField:
    """Vector field ``u(x) = sum_i omega_i(psi^{-1}(x)) e_i`` on the chart image.

    Callback forms are sampled on a lattice of ``box`` (default: the chart
    domain) with spacing ``h`` and keep the exact callback.
    """
    if isinstance(omega.components, GridField):
        return omega.components
    box = chart.domain if box is None else box
    if box is None:
        raise ValueError("need a box for callback forms")
    h = float(np.min(box.hi - box.lo)) / 64 if h is None else h
    fn = lambda X: omega.at_chart_points(chart, X)
    return GridField.from_function(fn, box, h, keep_analytic=True, components=chart.dim)


def field_to_oneform(u: GridField, chart: Chart) -> OneForm:
    """Inverse bridge: components ``p -> u(psi(p))``."""
    if u.analytic is None:
        return OneForm(u)
    return OneForm(lambda P: u.analytic(chart.psi(P)))


def manifold_slice(omega: OneForm, chart: Chart, param, y, h_t: float,
                   box: Optional[Box] = None, h: Optional[float] = None) -> Slice1D:
    """Slice ``t -> <omega, velocity>`` along a coordinate geodesic, through the bridge."""
    return extract_slice(oneform_to_field(omega, chart, box, h), param, y, h_t)


def pairing_slice(omega: OneForm, chart: Chart, param, y, h_t: float) -> np.ndarray:
    """Independent evaluator: pair the form with the velocity as ambient tangent vectors.

    The covector is raised with the Gram matrix of the ambient coordinate
    vectors, so the pairing is an inner product in the ambient space.
    """
    y = np.asarray(y, dtype=float)
    t = slice_times(param.tau, h_t)
    P, V = param.curve_samples(y[None], t)
    X, Xd = P[0], V[0]
    out = np.full(t.size, np.nan)
    fin = np.all(np.isfinite(X), axis=1)
    if chart.domain is not None:
        fin &= chart.domain.contains(np.where(np.isfinite(X), X, 0.0))
    if not fin.any():
        return out
    Xf = X[fin]
    pts = chart.psi_inv(Xf)
    G_i = chart.tangent_basis(Xf)
    k, n, N = G_i.shape
    gram = np.empty((k, n, n))
    for i in range(n):
        for j in range(n):
            gram[:, i, j] = chart.inner(pts, G_i[:, i], G_i[:, j])
    dual = np.einsum("kij,kjm->kim", np.linalg.inv(gram), G_i)
    w = omega.at_chart_points(chart, Xf)
    cov = np.einsum("ki,kim->km", w, dual)
    vel = np.einsum("ki,kim->km", Xd[fin], G_i)
    out[fin] = chart.inner(pts, cov, vel)
    return out


def oneform_jump_field(chart: Chart, surface, plus: OneForm, minus: OneForm,
                       lipschitz: float = 0.0) -> JumpField:
    """Bridged jump field of a one-form whose jump set is ``surface`` in chart coordinates."""
    return JumpField(surface, lambda X: plus.at_chart_points(chart, X),
                     lambda X: minus.at_chart_points(chart, X), lipschitz)


# ------------------------------------------------------ pushforward gradient

def _inv_sqrt(g: np.ndarray) -> np.ndarray:
    lam, Q = np.linalg.eigh(g)
    return (Q / np.sqrt(lam)[..., None, :]) @ np.swapaxes(Q, -1, -2)


def e_omega(report: GradientReport, chart: Chart, v) -> float:
    """``e(omega)(p)(v) = e(u)(psi(p)) L v . L v``; ``v`` in chart components, so ``L v = v``."""
    return report.e_of_u.quad(v)


def e_omega_norm(E, g) -> float:
    """Largest ``|e(v)| / |v|_p^2``: spectral radius of ``g^{-1/2} E g^{-1/2}``."""
    E = E.matrix() if isinstance(E, SymMatrix) else np.asarray(E, dtype=float)
    R = _inv_sqrt(np.asarray(g, dtype=float))
    return float(np.max(np.abs(np.linalg.eigvalsh(R @ E @ R))))


def chart_lipschitz(chart: Chart, region: Box, q: int = 9):
    """``(Lip(psi), Lip(psi^{-1}))`` from metric eigenvalues on a lattice of ``region``.

    On a small convex region these are ``sup 1/sqrt(min eig g)`` and
    ``sup sqrt(max eig g)``.
    """
    axes = [np.linspace(region.lo[i], region.hi[i], q) for i in range(region.dim)]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, region.dim)
    lam = np.linalg.eigvalsh(chart.metric.g(X))
    return float(np.max(1 / np.sqrt(lam[:, 0]))), float(np.max(np.sqrt(lam[:, -1])))


@dataclass
class ManifoldBoundReport:
    """Riemannian integral of ``||e(omega)||`` against the chart-pulled bound."""

    integral: float
    lam_chart: float
    lam_manifold: float
    bound_chart: float
    lip_psi: float
    lip_psi_inv: float
    eps: float
    bound: float
    ratio: float
    certificate: bool
    estimate: LambdaEstimate

    def to_dict(self) -> dict:
        return {"integral": self.integral, "lambda_chart": self.lam_chart,
                "lambda_manifold": self.lam_manifold, "bound_chart": self.bound_chart,
                "lip_psi": self.lip_psi, "lip_psi_inv": self.lip_psi_inv, "eps": self.eps,
                "bound": self.bound, "ratio": self.ratio, "certificate": self.certificate}


def manifold_gradient_bound(omega: OneForm, chart: Chart, region: Box, cells: int = 1,
                            h: Optional[float] = None, slack: float = 0.05,
                            quad_points: int = 4, n_dirs: Optional[int] = None,
                            s: ODESettings = DEFAULT_SETTINGS,
                            threads: Optional[int] = None) -> ManifoldBoundReport:
    """Compare ``int ||e(omega)|| dvol`` over ``psi^{-1}(region)`` with the measure bound.

    The chart estimate is the lower realization of the bound for the bridged
    field; dividing by ``Lip(psi^{-1})^2 Lip(psi)^(n-1)`` pulls it back to
    the manifold. The certificate is
    ``integral <= (1 + eps)^(n+1) bound_chart (1 + slack)`` with ``eps`` the
    chart's Lipschitz deviation from one and ``bound_chart`` the chart bound
    with its per-cell deviation factors.
    """
    n = chart.dim
    pad = 0.25 * float(np.max(region.hi - region.lo))
    big = Box(region.lo - pad, region.hi + pad)
    if chart.domain is not None:
        big = Box(np.maximum(big.lo, chart.domain.lo), np.minimum(big.hi, chart.domain.hi))
    hh = float(np.min(region.hi - region.lo)) / 32 if h is None else h
    u = oneform_to_field(omega, chart, big, hh)
    F = christoffel_field(chart.metric)
    est = lambda_estimate(u, F, region, cells, n_dirs, s=s, single_family=False,
                          threads=threads, max_refine=0)
    total = 0.0
    for c in est.cells:
        X, vol = _midpoints(c.box, quad_points)
        reps = reconstruct_e_batch(u, X, c.family, on_error="skip")
        g = chart.metric.g(X)
        for rp, gk in zip(reps, g):
            if isinstance(rp, GradientReport):
                total += e_omega_norm(rp.e_of_u, gk) * np.sqrt(np.linalg.det(gk)) * vol
    lp, lpi = chart_lipschitz(chart, region)
    eps = max(0.0, lp - 1, lpi - 1)
    bound_chart = float(sum(c.factor * c.lam for c in est.cells))
    bound = (1 + eps) ** (n + 1) * bound_chart * (1 + slack)
    lam_m = est.total / (lpi ** 2 * lp ** (n - 1))
    ratio = total / est.total if est.total > 0 else (0.0 if total == 0 else np.inf)
    return ManifoldBoundReport(total, est.total, lam_m, bound_chart, lp, lpi, eps, bound,
                               float(ratio), bool(total <= bound + 1e-12), est)


def speed_drift(chart: Chart, x0, v0, t_end: float = 1.0, samples: int = 101,
                s: ODESettings = DEFAULT_SETTINGS) -> float:
    """Largest relative change of ``g(x) x' . x'`` along the coordinate geodesic."""
    F = christoffel_field(chart.metric)
    traj = integrate(F, np.asarray(x0, dtype=float), np.asarray(v0, dtype=float),
                     (0.0, t_end), s)
    ts = np.linspace(0.0, min(t_end, traj.t_samples[-1]), samples)
    X, V = traj.dense_eval(ts)
    sp = np.einsum("ki,kij,kj->k", V, chart.metric.g(X), V)
    return float(np.max(np.abs(sp / sp[0] - 1.0)))
