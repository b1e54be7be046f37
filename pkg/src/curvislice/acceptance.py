"""Acceptance criteria as runnable checks.

Each check returns a ``Criterion`` carrying the measured quantities, the
thresholds they were held to and the verdict. Oracles are closed forms or
brute-force evaluations independent of the code under test.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .bv1d import (analyze_slice, eta_xi, integral_geometric, jump_slicing_check, lsc_probe,
                   rigid_seminorm, simplex_vertices, slice_from_values, sphere_area)
from .field import (Box, QuadraticSurface, christoffel_field, field_from_config, halfspace_chart,
                    hyperbolic_chart, zero_field)
from .geodesics import (ODESettings, exp_jacobian, exp_map, integrate, normal_maps,
                        sample_batch)
from .gridfield import GridField
from .manifold import OneForm, halfplane_chart, manifold_slice, pairing_slice, speed_drift, \
    stereographic_chart
from .projections import (CurvilinearProjection, build_family, build_parametrization,
                          rescaled_family, sphere_directions)
from .recipes import (grid_from_config, jump_field_from_config, load_recipe, smooth_bound_recipes,
                      vector_callable)
from .symgrad import (analytic_E, bound_checks, default_probes, parallelogram_defect,
                      parallelogram_residual, reconstruct_e, shell_egradient, shell_limit,
                      slice_identity_check)


@dataclass
class Criterion:
    """Outcome of one acceptance criterion.

    ``checks`` maps a label to ``(value, threshold, kind)`` where ``kind``
    is ``"max"`` (value must not exceed the threshold) or ``"min"``.
    """

    id: int
    title: str
    checks: Dict[str, tuple] = field(default_factory=dict)
    runtime: float = 0.0
    runtime_limit: Optional[float] = None
    error: Optional[str] = None
    info: Dict[str, float] = field(default_factory=dict)

    def add(self, label: str, value, threshold, kind: str = "max") -> None:
        self.checks[label] = (float(value), float(threshold), kind)

    def failures(self) -> List[str]:
        out = []
        for k, (v, t, kind) in self.checks.items():
            ok = (v <= t) if kind == "max" else (v >= t)
            if not ok or not np.isfinite(v):
                out.append(k)
        if self.error:
            out.append("error")
        return out

    @property
    def passed(self) -> bool:
        runtime_ok = self.runtime_limit is None or self.runtime <= self.runtime_limit
        return not self.failures() and runtime_ok

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = "" if self.passed else " failing: " + ", ".join(
            self.failures() + ([] if self.runtime_limit is None or self.runtime <= self.runtime_limit
                               else ["runtime"]))
        return f"{tag} criterion {self.id:2d} {self.title} ({self.runtime:.1f}s){extra}"

    def to_dict(self) -> dict:
        """Deterministic summary (runtimes excluded)."""
        return {"id": self.id, "title": self.title, "passed": not self.failures(),
                "checks": {k: {"value": v, "threshold": t, "kind": kind}
                           for k, (v, t, kind) in self.checks.items()},
                "info": {k: float(v) for k, v in self.info.items()}, "error": self.error}


def _slope(r, d) -> float:
    """Least-squares slope of ``log d`` against ``log r``."""
    return float(np.polyfit(np.log(r), np.log(d), 1)[0])


# ------------------------------------------------------------------ 1

def euclidean_reduction(threads: Optional[int] = None) -> Criterion:
    c = Criterion(1, "Euclidean reduction", runtime_limit=5.0)
    F = zero_field(2, Box([-3, -3], [4, 4]))
    x0 = np.array([0.5, 0.5])
    fam = build_family(F, x0, 0.5, 12, threads=threads)
    rng = np.random.default_rng(0)
    X = x0 + 0.5 * rng.uniform(-1, 1, (200, 2)) / np.sqrt(2)
    err = 0.0
    for xi, p in zip(fam.directions, fam.projections):
        y, t, _, _ = p.project(X)
        d = X - x0
        err = max(err, float(np.max(np.abs(y - (d - np.outer(d @ xi, xi))))),
                  float(np.max(np.abs(t - d @ xi))))
    c.add("projection_vs_orthogonal", err, 1e-12)
    xis = rng.uniform(-1, 1, (20, 2))
    c.add("exp_minus_translation", max(float(np.max(np.abs(exp_map(F, x0, v) - (x0 + v))))
                                       for v in xis), 0.0)
    A = np.array([[1.0, 2.0], [0.0, 3.0]])
    S = 0.5 * (A + A.T)
    h = 1 / 32
    u = GridField.from_function(lambda Z: Z @ A.T, Box([-1, -1], [2, 2]), h, keep_analytic=True)
    pts = [np.array([0.5, 0.5]), np.array([0.3, 0.6]), np.array([0.7, 0.35])]
    ea = max(float(np.max(np.abs(reconstruct_e(u, p, fam).e_of_u.matrix() - S))) for p in pts)
    eg = max(float(np.max(np.abs(reconstruct_e(u, p, fam, use_analytic=False).e_of_u.matrix() - S)))
             for p in pts)
    c.add("reconstruct_analytic", ea, 1e-8)
    c.add("reconstruct_grid", eg, 4 * h * h)
    return c


# ------------------------------------------------------------------ 2

def closed_form_geodesics(threads: Optional[int] = None) -> Criterion:
    c = Criterion(2, "Closed-form geodesics", runtime_limit=5.0)
    H = christoffel_field(hyperbolic_chart())
    s = ODESettings(rel_tol=1e-9)
    t = np.linspace(-1, 1, 201)
    tr = integrate(H, [0, 1], [0, 1], (-1, 1), s)
    X, V = tr.dense_eval(t)
    e1 = np.max(np.abs(X - np.column_stack([0 * t, np.exp(t)])))
    tr = integrate(H, [0, 1], [1, 0], (-1, 1), s)
    X, V = tr.dense_eval(t)
    e2 = np.max(np.abs(X - np.column_stack([np.tanh(t), 1 / np.cosh(t)])))
    c.add("vertical_geodesic", e1, 1e-6)
    c.add("semicircle_geodesic", e2, 1e-6)
    rng = np.random.default_rng(0)
    xi = rng.standard_normal((8, 2))
    xi = 0.4 * xi / np.linalg.norm(xi, axis=1, keepdims=True)
    x0 = np.tile([0.0, 1.0], (8, 1))
    ts = np.linspace(0, 1, 11)
    worst = 0.0
    for sc in (0.25, 0.5, 2.0):
        A, _ = sample_batch(H, x0, sc * xi, ts, s)
        B, _ = sample_batch(H, x0, xi, sc * ts, s)
        worst = max(worst, float(np.max(np.abs(A - B))))
    c.add("homogeneity_identity", worst, 1e-7)
    return c


# ------------------------------------------------------------------ 3

def exp_asymptotics(threads: Optional[int] = None) -> Criterion:
    c = Criterion(3, "Exponential-map asymptotics")
    H = christoffel_field(hyperbolic_chart())
    x0 = np.array([0.0, 1.0])
    J = exp_jacobian(H, x0, np.zeros(2), step=1e-4)
    c.add("jacobian_at_zero", np.max(np.abs(J - np.eye(2))), 1e-5)
    zs = sphere_directions(2, 8)
    rs = np.array([0.1, 0.05, 0.025])
    dev = [max(float(np.linalg.norm(normal_maps(H, x0, x0 + r * z).phi - z)) for z in zs)
           for r in rs]
    c.add("direction_deviation_slope", _slope(rs, dev), 0.9, "min")
    r = 0.05
    dirs = np.concatenate([sphere_directions(2, 16), [[0.0, -1.0], [0.0, 1.0]]])
    pts = np.concatenate([dirs * a for a in (0.25, 0.5, 1.0)])
    ratio = max(abs(normal_maps(H, x0, x0 + r * p).dist / (r * np.linalg.norm(p)) - 1)
                for p in pts)
    c.add("distance_ratio_minus_one", ratio, 0.02)
    # closed form along the vertical geodesic towards the boundary: d = -log(1 - r)
    c.info["distance_ratio_minus_one_exact_sup"] = -np.log1p(-r) / r - 1
    return c


# ------------------------------------------------------------------ 4

def rescaling_convergence(threads: Optional[int] = None) -> Criterion:
    c = Criterion(4, "Rescaling convergence")
    H = christoffel_field(hyperbolic_chart())
    x0 = np.array([0.0, 1.0])
    rs = 0.2 / 2.0 ** np.arange(5)
    orders_phi, orders_P = [], []
    for xi in sphere_directions(2, 16):
        maps = [rescaled_family(H, x0, r, xi) for r in rs]
        orders_phi.append(_slope(rs, [m.sup_phi_deviation for m in maps]))
        orders_P.append(_slope(rs, [m.sup_P_deviation for m in maps]))
    c.add("phi_order_min", min(orders_phi), 0.9, "min")
    c.add("P_order_min", min(orders_P), 0.9, "min")
    return c


# ------------------------------------------------------------------ 5

JUMP_RECIPES = ("jumps-plane", "jumps-sphere", "jumps-hyperbolic")


def jump_slicing(threads: Optional[int] = None, recipes=JUMP_RECIPES) -> Criterion:
    c = Criterion(5, "Jump slicing", runtime_limit=60.0)
    for name in recipes:
        doc = load_recipe(name)
        F, _ = field_from_config(doc["field"])
        fd = doc["family"]
        fam = build_family(F, fd["x0"], fd["R0"], fd["n_dirs"], threads=threads)
        jf = jump_field_from_config(doc["u"])
        u = grid_from_config(doc["u"])
        rep = jump_slicing_check(u, jf, fam, doc["jumps"]["n_slices"], seed=doc.get("seed", 0))
        tag = name.split("-", 1)[1]
        c.add(f"{tag}_position_error_over_h", rep.max_position_error / u.h, 1.0)
        c.add(f"{tag}_recall", rep.recall, 0.99, "min")
        c.add(f"{tag}_precision", rep.precision, 0.99, "min")
        c.add(f"{tag}_trace_ratio", rep.max_trace_ratio, 5.0)
    return c


# ------------------------------------------------------------------ 6

def symmetric_gradient(threads: Optional[int] = None) -> Criterion:
    c = Criterion(6, "Symmetric-gradient identity")
    chart = hyperbolic_chart()
    H = christoffel_field(chart)
    par = build_parametrization(H, [0, 1.0], [0, 1.0], 1.0, 1.0)
    ux2 = lambda x: np.array([0.0, x[1]])
    c.add("slice_identity_residual", slice_identity_check(ux2, chart, par, np.zeros(2), 0.5), 1e-5)
    fn = vector_callable({"kind": "builtin", "name": "hyperbolic-smooth"})
    u = GridField.from_function(fn, Box([-1, 0.5], [1, 1.6]), 1 / 64, keep_analytic=True)
    x = np.array([0.1, 1.0])
    fam1 = build_family(H, x, 0.25, threads=threads)
    E = analytic_E(lambda p: fn(np.atleast_2d(p))[0], chart, x).matrix()
    r1 = reconstruct_e(u, x, fam1, use_analytic=False)
    c.add("grid_relative_error", np.linalg.norm(r1.e_of_u.matrix() - E) / np.linalg.norm(E), 0.02)
    th = np.pi / 24
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    fam2 = build_family(H, x, 0.25, directions=fam1.directions @ R.T, threads=threads)
    worst = 0.0
    for ua in (True, False):
        a = reconstruct_e(u, x, fam1, use_analytic=ua)
        b = reconstruct_e(u, x, fam2, use_analytic=ua)
        d = float(np.max(np.abs(a.e_of_u.matrix() - b.e_of_u.matrix())))
        worst = max(worst, d / (2 * (a.residual + b.residual) + 1e-6))
    c.add("family_discrepancy_over_bound", worst, 1.0)
    return c


# ------------------------------------------------------------------ 7

def measures(threads: Optional[int] = None) -> Criterion:
    c = Criterion(7, "Measures")
    Z = zero_field(2, Box([-3, -3], [4, 4]))
    uj = GridField.from_function(lambda X: np.where(X[:, :1] > 0.5, [2.0, 0.0], [0.0, 0.0]),
                                 Box([0, 0], [1, 1]), 1 / 64)
    diag = np.array([1.0, 1.0]) / np.sqrt(2)
    pd = CurvilinearProjection(build_parametrization(Z, [0.5, 0.5], diag, 0.75, 0.75, 0.1))
    eta = eta_xi(uj, pd)
    c.add("eta_diagonal_relative_error", abs(eta - np.sqrt(2) / 2) / (np.sqrt(2) / 2), 0.02)
    t = np.arange(-1, 1 + 1e-9, 1 / 128)
    worst = 0.0
    for sig in (np.exp(2 * t) + np.where(t > 0, 0.3, 0.0),
                np.sin(3 * t) + np.where(t > -0.2, 2.0, 0.0) - np.where(t > 0.5, 0.7, 0.0),
                np.where(t >= 0.3, 0.5, 0.0)):
        worst = max(worst, analyze_slice(slice_from_values(t, sig)).decomposition_residual())
    c.add("decomposition_residual", worst, 1e-9)
    fam = build_family(Z, [0.5, 0.5], 0.75, 32, threads=threads)
    ig = integral_geometric(uj, fam, threads=threads)
    th = np.linspace(0, 2 * np.pi, 20001)[:-1]
    xi = np.column_stack([np.cos(th), np.sin(th)])
    # jump (2, 0) across a unit-length vertical segment with normal e1
    oracle = sphere_area(2) * np.mean(np.minimum(np.abs(2 * xi[:, 0]), 1) * np.abs(xi[:, 0]))
    c.add("integral_geometric_relative_error", abs(ig - oracle) / oracle, 0.02)
    rep = lsc_probe(uj, Z, [0.5, 0.5], [1.0, 0.0], Box([0.1, 0.1], [0.9, 0.9]), 0.75)
    c.add("lsc_margin", rep.mu_limit - min(rep.mu_sequence) - rep.rel_slack * rep.mu_limit, 0.0)
    return c


# ------------------------------------------------------------------ 8

def rigid(threads: Optional[int] = None) -> Criterion:
    c = Criterion(8, "Rigid seminorm")
    Z = zero_field(2)
    V = simplex_vertices([0, 0], 2)
    W = np.array([[0.0, 1.0], [-1.0, 0.0]])
    c.add("skew_rigid", rigid_seminorm(Z, [0, 0], 1.0, [0, 0], 0.2 + V @ W.T), 1e-12)
    w = np.array([[0, 0], [1, 0], [0, 1.0]]) + 0.3
    e = rigid_seminorm(Z, [0, 0], 1.0, [0, 0], w)
    c.add("pure_strain", abs(e - (2 + np.sqrt(2))), 1e-9)
    c.add("homogeneity", abs(rigid_seminorm(Z, [0, 0], 1.0, [0, 0], 2 * w) - 2 * e), 1e-12)
    return c


# ------------------------------------------------------------------ 9

def parallelogram(threads: Optional[int] = None) -> Criterion:
    c = Criterion(9, "Parallelogram property")
    cases = [(lambda X: np.column_stack([X[:, 0] ** 2, 0 * X[:, 0]]), np.zeros(2)),
             (vector_callable({"kind": "builtin", "name": "flat-smooth"}), np.array([0.3, 0.2])),
             (vector_callable({"kind": "builtin", "name": "flat-mild"}), np.array([0.5, 0.5]))]
    c.add("smooth_defect", max(parallelogram_residual(f, x) for f, x in cases), 1e-6)
    c.add("negative_control", parallelogram_defect(lambda z: abs(z[0]) ** 3, default_probes(2)),
          0.1, "min")
    return c


# ------------------------------------------------------------------ 10

def bounds(threads: Optional[int] = None) -> Criterion:
    c = Criterion(10, "Bounds")
    for doc in smooth_bound_recipes():
        F, _ = field_from_config(doc["field"])
        bd = doc["bounds"]
        ud = dict(doc["u"])
        if "grid" in bd:
            ud["grid"] = bd["grid"]
        ud["grid"] = dict(ud["grid"], analytic=True)
        u = grid_from_config(ud)
        rep = bound_checks(u, F, Box(bd["box"]["lo"], bd["box"]["hi"]), cells=bd.get("cells", 2),
                           threads=threads)
        c.add(f"{doc['name']}_certificate_ratio", rep.worst_cell_ratio, 1.0)
        c.add(f"{doc['name']}_slope_violation_rate", rep.slope_violation_rate, 0.01)
    return c


# ------------------------------------------------------------------ 11

def manifold_layer(threads: Optional[int] = None) -> Criterion:
    c = Criterion(11, "Manifold layer")
    worst = 0.0
    H = halfplane_chart()
    S = stereographic_chart()
    for chart, x0, xi, form in (
            (H, [0.0, 1.0], [0.0, 1.0], lambda P: np.column_stack([0 * P[:, 0], P[:, 1]])),
            (H, [0.1, 1.2], [0.6, 0.8], lambda P: np.column_stack([np.sin(P[:, 0]), P[:, 0] * P[:, 1]])),
            (S, [0.2, 0.1], [0.6, 0.8], lambda P: np.column_stack([np.sin(P[:, 0]) + P[:, 2],
                                                                   P[:, 1] * P[:, 0]]))):
        F = christoffel_field(chart.metric)
        par = build_parametrization(F, x0, xi, 0.4, 0.4, None)
        om = OneForm(form)
        for a in (-0.2, 0.0, 0.15):
            y = a * np.array([-xi[1], xi[0]])
            v1 = manifold_slice(om, chart, par, y, 0.01, box=Box([-1.5, 0.3], [1.5, 2.5])
                                if chart is H else Box([-1.5, -1.5], [1.5, 1.5])).values
            v2 = pairing_slice(om, chart, par, y, 0.01)
            ok = np.isfinite(v1) & np.isfinite(v2)
            worst = max(worst, float(np.max(np.abs(v1[ok] - v2[ok]))))
    c.add("dual_evaluator_agreement", worst, 1e-9)
    drift = max(speed_drift(H, [0, 1], [1, 0.5]), speed_drift(H, [0.3, 0.8], [-0.4, 1.0]),
                speed_drift(S, [0.3, 0], [0.2, 1]), speed_drift(S, [-0.5, 0.4], [1.0, 0.3]))
    c.add("speed_drift", drift, 1e-7)
    theta = QuadraticSurface([[1.0, 0.3], [0.3, 0.5]], [0.2, -0.1])
    A3 = np.array([[1, 2, 0.5], [0, 3, -1], [0.4, 0.2, 2.0]])
    u = lambda X: X @ A3.T + np.array([0.1, -0.2, 1.0])
    pts = np.array([[0.1, 0.2, 0.0], [-0.3, 0.1, 0.5]])
    lim = shell_limit(u, theta, pts)
    rhos = np.array([1.0, 0.1, 0.01])
    diffs = [float(np.max(np.abs(shell_egradient(u, r, theta, pts).e_ab - lim))) for r in rhos]
    c.add("shell_convergence_order", _slope(rhos, diffs), 0.9, "min")
    return c


SMOKE_ID = 12

CRITERIA: Dict[int, Callable[..., Criterion]] = {
    1: euclidean_reduction, 2: closed_form_geodesics, 3: exp_asymptotics,
    4: rescaling_convergence, 5: jump_slicing, 6: symmetric_gradient, 7: measures,
    8: rigid, 9: parallelogram, 10: bounds, 11: manifold_layer,
}


def run_criterion(k: int, threads: Optional[int] = None) -> Criterion:
    """Run criterion ``k`` (12 is the n=3 smoke set), timing it; crashes become failures."""
    fn = smoke_n3 if k == SMOKE_ID else CRITERIA[k]
    t0 = time.perf_counter()
    try:
        c = fn(threads)
    except Exception as exc:  # a crash is a failed criterion, reported not raised
        c = Criterion(k, fn.__name__.replace("_", " "), error=f"{type(exc).__name__}: {exc}")
    c.runtime = time.perf_counter() - t0
    return c


# ------------------------------------------------------------ n = 3 smoke

def smoke_n3(threads: Optional[int] = None) -> Criterion:
    """Three-dimensional variants of the Euclidean reduction, curved reconstruction,
    jump slicing and the rigid seminorm."""
    c = Criterion(SMOKE_ID, "n=3 smoke variants", runtime_limit=600.0)
    Z = zero_field(3, Box([-3] * 3, [4] * 3))
    x0 = np.full(3, 0.5)
    fam = build_family(Z, x0, 0.5, threads=threads)
    A = np.array([[1.0, 2, 0], [0, 3, 1], [0.5, 0, -1]])
    u = GridField.from_function(lambda X: X @ A.T, Box([-0.5] * 3, [1.5] * 3), 1 / 8,
                                keep_analytic=True)
    r = reconstruct_e(u, x0, fam)
    c.add("flat_reconstruct", np.max(np.abs(r.e_of_u.matrix() - 0.5 * (A + A.T))), 1e-8)
    chart = halfspace_chart(3)
    H3 = christoffel_field(chart)
    fn = lambda X: np.column_stack([np.sin(X[:, 0]), X[:, 0] * X[:, 2], X[:, 2] ** 2])
    x = np.array([0.0, 0.0, 1.0])
    uh = GridField.from_function(fn, Box([-1, -1, 0.5], [1, 1, 1.6]), 1 / 16, keep_analytic=True)
    famh = build_family(H3, x, 0.2, threads=threads)
    E = analytic_E(lambda p: fn(np.atleast_2d(p))[0], chart, x).matrix()
    rh = reconstruct_e(uh, x, famh)
    c.add("curved_reconstruct_relative", np.linalg.norm(rh.e_of_u.matrix() - E) / np.linalg.norm(E),
          1e-4)
    jd = {"surface": {"kind": "plane", "normal": [1, 0.2, 0], "offset": 0.1},
          "plus": {"kind": "constant", "value": [1, 0, 0.5]},
          "minus": {"kind": "constant", "value": [0, 0, 0]}}
    jf = jump_field_from_config(jd)
    ug = jf.grid(Box([-1] * 3, [1] * 3), 1 / 32)
    famz = build_family(zero_field(3, Box([-3] * 3, [3] * 3)), np.zeros(3), 0.6, threads=threads)
    rep = jump_slicing_check(ug, jf, famz, 60)
    c.add("jump_recall", rep.recall, 0.99, "min")
    c.add("jump_precision", rep.precision, 0.99, "min")
    w = np.concatenate([np.zeros((1, 3)), np.eye(3)]) + 0.3
    e = rigid_seminorm(zero_field(3), np.zeros(3), 1.0, np.zeros(3), w)
    c.add("pure_strain", abs(e - (3 + 3 * np.sqrt(2))), 1e-9)
    return c
