"""Reconstruction of the curvilinear symmetric gradient from slice derivatives.

Along every parametrizing curve the slice derivative equals ``e(u) v . v``
with ``v`` the curve velocity. Sampling many directions through a point gives
an over-determined linear system for the symmetric matrix ``e(u)(x)``. The
module also provides the approximate symmetric gradient ``e - u . F``, the
closed-form Christoffel expression for smooth fields, the difference-quotient
estimator of the quadratic form, the integral and slope bounds and the
rescaled shell strain components.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .bv1d import analyze_slice, mu_xi_u
from .field import Box, MetricChart, QuadraticField, christoffel_symbols, eval_field
from .geodesics import DEFAULT_SETTINGS, ODESettings, sample_batch
from .gridfield import GridField, Slice1D
from .parallel import parallel_map
from .projections import (CurvilinearProjection, FamilyConstructionError, ProjectionFamily,
                          build_family, build_parametrization)


class DerivativeAtJumpError(ValueError):
    """A slice derivative was requested inside a jump window."""


class DirectionDegenerateError(RuntimeError):
    """The direction system does not determine a symmetric matrix."""


class InsufficientDataError(RuntimeError):
    """Too many directions were blocked by jumps or coverage."""


# ------------------------------------------------------------ SymMatrix

def _pairs(n: int) -> List[Tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i, n)]


@dataclass(frozen=True)
class SymMatrix:
    """Symmetric matrix stored as its row-major upper triangle."""

    n: int
    upper: np.ndarray

    @classmethod
    def from_matrix(cls, M) -> "SymMatrix":
        M = np.asarray(M, dtype=float)
        n = M.shape[0]
        S = 0.5 * (M + M.T)
        return cls(n, np.array([S[i, j] for i, j in _pairs(n)]))

    def matrix(self) -> np.ndarray:
        M = np.zeros((self.n, self.n))
        for k, (i, j) in enumerate(_pairs(self.n)):
            M[i, j] = M[j, i] = self.upper[k]
        return M

    def quad(self, zeta) -> float:
        z = np.asarray(zeta, dtype=float)
        return float(z @ self.matrix() @ z)

    @property
    def op_norm(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvalsh(self.matrix()))))

    @property
    def frobenius(self) -> float:
        return float(np.linalg.norm(self.matrix()))

    def to_list(self) -> list:
        return self.matrix().tolist()


# ------------------------------------------------------- slice derivatives

def _jump_intervals(s: Slice1D, jumps) -> List[Tuple[float, float]]:
    out = []
    for j in jumps:
        a, b = j.window
        b = min(b, s.t.size - 1)
        out.append((float(s.t[a]), float(s.t[b])))
    return out


def slice_derivative(s: Slice1D, t: float, jumps=()) -> float:
    """Central-difference derivative of the slice at ``t``.

    Uses the neighbouring samples when ``t`` is a sample time and the
    linear interpolant at ``t +- h_t`` otherwise. Raises
    ``DerivativeAtJumpError`` when ``t`` is closer than two samples to a
    jump window.
    """
    h = s.h_t
    for a, b in _jump_intervals(s, jumps):
        if a - 2 * h - 1e-12 <= t <= b + 2 * h + 1e-12:
            raise DerivativeAtJumpError(f"t = {t} lies within two samples of a jump")
    i = int(np.rint((t - s.t[0]) / h))
    if 0 < i < s.t.size - 1 and abs(s.t[i] - t) <= 1e-9 * h:
        lo, hi = s.values[i - 1], s.values[i + 1]
        if not (s.mask[i - 1] and s.mask[i + 1]):
            raise ValueError("derivative stencil leaves the valid part of the slice")
        return float((hi - lo) / (2 * h))
    if t - h < s.t[0] or t + h > s.t[-1]:
        raise ValueError("derivative stencil leaves the sampled range")
    good = s.mask
    lo = np.interp(t - h, s.t[good], s.values[good])
    hi = np.interp(t + h, s.t[good], s.values[good])
    return float((hi - lo) / (2 * h))


# ---------------------------------------------------------- reconstruction

@dataclass
class GradientReport:
    """Reconstructed ``e(u)(x)`` with least-squares diagnostics.

    ``velocities`` and ``derivatives`` are the rows actually used;
    ``blocked`` counts directions discarded for jumps or missing coverage.
    """

    x: np.ndarray
    e_of_u: SymMatrix
    residual: float
    cond: float
    directions_used: int
    blocked: int
    velocities: np.ndarray
    derivatives: np.ndarray
    u_at_x: np.ndarray
    F: Optional[QuadraticField] = None

    def tilde_e(self, zeta) -> float:
        """Approximate symmetric gradient ``e(u) z . z - u(x) . F(x, z)``."""
        return tilde_e(self, self.F, self.u_at_x, zeta)

    def tilde_matrix(self) -> np.ndarray:
        """Matrix of the quadratic form ``z -> tilde_e(z)``."""
        E = self.e_of_u.matrix()
        if self.F is None or self.F.is_zero:
            return E
        G = self.F.G(self.x)
        return E - np.einsum("l,lij->ij", self.u_at_x, G)

    def to_dict(self) -> dict:
        return {"x": self.x.tolist(), "e": self.e_of_u.to_list(),
                "tilde_e": self.tilde_matrix().tolist(), "residual": self.residual,
                "cond": self.cond, "directions_used": self.directions_used,
                "blocked": self.blocked}


def _design(W: np.ndarray) -> np.ndarray:
    """Rows ``(w_i w_j, i <= j)`` with off-diagonal coefficients doubled."""
    n = W.shape[1]
    cols = [W[:, i] * W[:, j] * (1.0 if i == j else 2.0) for i, j in _pairs(n)]
    return np.column_stack(cols)


def solve_symmetric(W, d, cutoff: float = 1e-10):
    """Least-squares symmetric ``S`` with ``S w_k . w_k = d_k``.

    Truncated SVD with relative cutoff; returns ``(S, residual, cond)``.
    Raises ``DirectionDegenerateError`` below full rank.
    """
    W = np.asarray(W, dtype=float)
    d = np.asarray(d, dtype=float)
    n = W.shape[1]
    m = n * (n + 1) // 2
    if W.shape[0] < m:
        raise InsufficientDataError(f"{W.shape[0]} usable directions, need {m}")
    A = _design(W)
    U, sig, Vt = np.linalg.svd(A, full_matrices=False)
    keep = sig > cutoff * sig[0]
    if keep.sum() < m:
        raise DirectionDegenerateError("direction system has deficient rank")
    coef = Vt.T @ ((U.T @ d) / sig)
    res = float(np.linalg.norm(A @ coef - d))
    return SymMatrix(n, coef), res, float(sig[0] / sig[-1])


def _default_h_t(u: GridField, family: ProjectionFamily, use_analytic: bool) -> float:
    if use_analytic and u.analytic is not None:
        return 1e-3 * min(1.0, family.R0)
    return u.h / 2


def reconstruct_e_batch(u: GridField, X, family: ProjectionFamily,
                        s: Optional[ODESettings] = None, h_t: Optional[float] = None,
                        half_width: int = 12, use_analytic: bool = True,
                        detect_jumps: bool = True, on_error: str = "raise"):
    """Reconstruct ``e(u)`` at every row of ``X``.

    For each direction the curve through ``x`` is restarted from ``x`` with
    its parametrization velocity and sampled on ``half_width`` steps of
    ``h_t`` either side; slices with a detected jump within two samples of
    ``x`` are dropped. With ``on_error="skip"`` failed points yield the
    exception instead of raising.
    """
    X = np.array(X, dtype=float, ndmin=2)
    s = family.settings if s is None else s
    h_t = _default_h_t(u, family, use_analytic) if h_t is None else float(h_t)
    F = family.F
    n = family.dim
    P, N = X.shape[0], len(family)
    _, _, vel, ok = family.project_all(X)
    V0 = np.where(ok[..., None], vel, family.directions[:, None, :])
    X0 = np.broadcast_to(X, (N, P, n)).reshape(-1, n)
    ts = np.arange(-half_width, half_width + 1) * h_t
    Pts, Vel = sample_batch(F, X0, V0.reshape(-1, n), ts, s)
    vals = u.evaluate(Pts.reshape(-1, n), use_analytic).reshape(N * P, ts.size, n)
    w = np.einsum("mqi,mqi->mq", vals, Vel).reshape(N, P, ts.size)
    mask = np.isfinite(w)
    c = half_width
    h_space = 0.0 if (use_analytic and u.analytic is not None) else u.h
    U_x = u.evaluate(X, use_analytic)
    out = []
    for p in range(P):
        rows, ds = [], []
        blocked = 0
        for k in range(N):
            if not ok[k, p] or not mask[k, p, c - 1:c + 2].all():
                blocked += 1
                continue
            sl = Slice1D(family.directions[k], np.zeros(n), ts, np.where(mask[k, p], w[k, p], np.nan),
                         mask[k, p], Vel.reshape(N, P, ts.size, n)[k, p],
                         Pts.reshape(N, P, ts.size, n)[k, p], h_t, h_space)
            jumps = []
            if detect_jumps:
                jumps = analyze_slice(sl, window=3, strict=False).jumps
            try:
                ds.append(slice_derivative(sl, 0.0, jumps))
            except DerivativeAtJumpError:
                blocked += 1
                continue
            rows.append(vel[k, p])
        try:
            S, res, cond = solve_symmetric(np.array(rows).reshape(-1, n), np.array(ds))
        except (InsufficientDataError, DirectionDegenerateError) as exc:
            if on_error == "raise":
                raise
            out.append(exc)
            continue
        out.append(GradientReport(X[p].copy(), S, res, cond, len(rows), blocked,
                                  np.array(rows), np.array(ds), U_x[p], F))
    return out


def reconstruct_e(u: GridField, x, family: ProjectionFamily,
                  s: Optional[ODESettings] = None, h_t: Optional[float] = None,
                  half_width: int = 12, use_analytic: bool = True,
                  detect_jumps: bool = True) -> GradientReport:
    """Least-squares reconstruction of ``e(u)(x)`` from slice derivatives."""
    return reconstruct_e_batch(u, np.asarray(x, dtype=float)[None], family, s, h_t,
                               half_width, use_analytic, detect_jumps)[0]


def tilde_e(report: GradientReport, F: Optional[QuadraticField], u_at_x, zeta) -> float:
    """``e(u)(x) z . z - u(x) . F(x, z)``."""
    val = report.e_of_u.quad(zeta)
    if F is None or F.is_zero:
        return val
    return val - float(np.dot(u_at_x, eval_field(F, report.x, np.asarray(zeta, dtype=float))))


# --------------------------------------------------- closed-form gradient

def _jacobian_fd(u: Callable, x: np.ndarray, h: float) -> np.ndarray:
    """``J[i, j] = d u_j / d x_i`` by central differences."""
    n = x.size
    J = np.zeros((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        J[i] = (np.asarray(u(x + e), dtype=float).reshape(-1)
                - np.asarray(u(x - e), dtype=float).reshape(-1)) / (2 * h)
    return J


def analytic_E(u: Callable, chart: MetricChart, x, du: Optional[Callable] = None,
               h: float = 1e-6) -> SymMatrix:
    """``1/2 (d_i u_j + d_j u_i) - sum_l Gamma^l_ij u_l`` at ``x``.

    ``u`` maps a point ``(n,)`` to ``(n,)``; ``du`` optionally returns
    ``J[i, j] = d u_j / d x_i`` exactly.
    """
    x = np.asarray(x, dtype=float)
    J = np.asarray(du(x), dtype=float) if du is not None else _jacobian_fd(u, x, h)
    Gam = christoffel_symbols(chart, x)
    ux = np.asarray(u(x), dtype=float).reshape(-1)
    return SymMatrix.from_matrix(0.5 * (J + J.T) - np.einsum("l,lij->ij", ux, Gam))


def slice_identity_check(u: Callable, chart: MetricChart, param, y, t: float,
                         h_t: float = 1e-3, du: Optional[Callable] = None) -> float:
    """``|d/dt (u . velocity)(t) - E(u)(gamma(t)) velocity . velocity|``.

    The derivative is the central difference of the slice at ``t +- h_t``.
    """
    y = np.asarray(y, dtype=float)
    T = np.array([t - h_t, t, t + h_t])
    X, V = param.phi(np.broadcast_to(y, (3, y.size)), T)
    vals = np.array([float(np.dot(np.asarray(u(X[i]), dtype=float).reshape(-1), V[i]))
                     for i in (0, 2)])
    deriv = (vals[1] - vals[0]) / (2 * h_t)
    E = analytic_E(u, chart, X[1], du)
    return abs(deriv - E.quad(V[1]))


# ------------------------------------------------------ quadratic form test

def _as_callable(u) -> Callable:
    if isinstance(u, GridField):
        return lambda X: u.evaluate(np.array(X, ndmin=2))
    return lambda X: np.asarray(u(np.array(X, dtype=float, ndmin=2)), dtype=float)


def _trimmed_mean(v: np.ndarray, frac: float) -> float:
    v = np.sort(v)
    k = int(np.floor(frac * v.size))
    return float(np.mean(v[k: v.size - k])) if v.size > 2 * k else float(np.mean(v))


def q_tilde(u, x, zeta, r: float = 1e-2, samples: int = 16, trim: float = 0.1) -> float:
    """Difference-quotient estimate of the quadratic form at ``x`` along ``zeta``.

    For every radius scale ``s in {r, r/2, r/4}`` the symmetric quotient
    ``(u(x + p zeta) - u(x - p zeta)) . zeta / (2p)`` is averaged (trimmed
    mean) over ``p`` stratified in the annulus ``[s/2, s]``; a fit
    ``m(s) = q + c s^2`` extrapolates to ``s = 0``. ``u`` is a vectorized
    callback on points ``(k, n)`` or a GridField.
    """
    f = _as_callable(u)
    x = np.asarray(x, dtype=float)
    z = np.asarray(zeta, dtype=float)
    scales = np.array([r, r / 2, r / 4])
    means = []
    for sc in scales:
        p = sc * (0.5 + 0.5 * (np.arange(samples) + 0.5) / samples)
        up = f(x + p[:, None] * z)
        um = f(x - p[:, None] * z)
        quo = ((up - um) @ z) / (2 * p)
        means.append(_trimmed_mean(quo, trim))
    A = np.column_stack([np.ones(3), scales ** 2])
    coef, *_ = np.linalg.lstsq(A, np.array(means), rcond=None)
    return float(coef[0])


def default_probes(n: int, count: int = 8, seed: int = 0) -> np.ndarray:
    """Probe pairs ``(count, 2, n)``: coordinate pairs, equal vectors and seeded Gaussians."""
    rng = np.random.default_rng(seed)
    I = np.eye(n)
    fixed = [(I[0], I[1 % n]), (I[0], I[0]), (I[0] + I[-1], I[0] - 0.5 * I[-1])]
    rand = [tuple(rng.standard_normal((2, n))) for _ in range(max(0, count - len(fixed)))]
    return np.array([np.stack(p) for p in fixed + rand])


def parallelogram_defect(q: Callable, probes) -> float:
    """``max |q(a+b) + q(a-b) - 2 q(a) - 2 q(b)|`` over probe pairs."""
    out = 0.0
    for a, b in np.asarray(probes, dtype=float):
        out = max(out, abs(q(a + b) + q(a - b) - 2 * q(a) - 2 * q(b)))
    return out


def parallelogram_residual(u, x, family: Optional[ProjectionFamily] = None, probes=None,
                           r: float = 1e-2, samples: int = 16, trim: float = 0.1,
                           seed: int = 0) -> float:
    """Parallelogram defect of the difference-quotient quadratic form at ``x``.

    The estimator does not use the curves, so ``family`` only fixes the
    dimension when given.
    """
    x = np.asarray(x, dtype=float)
    n = family.dim if family is not None else x.size
    probes = default_probes(n, seed=seed) if probes is None else probes
    return parallelogram_defect(lambda z: q_tilde(u, x, z, r, samples, trim), probes)


# ----------------------------------------------------------------- bounds

def _lattice(C: Box, q: int) -> np.ndarray:
    axes = [np.linspace(C.lo[i], C.hi[i], q) for i in range(C.dim)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, C.dim)


def _midpoints(C: Box, q: int) -> Tuple[np.ndarray, float]:
    h = (C.hi - C.lo) / q
    axes = [C.lo[i] + (np.arange(q) + 0.5) * h[i] for i in range(C.dim)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, C.dim)
    return pts, float(np.prod(h))


def projection_derivative(proj: CurvilinearProjection, y: np.ndarray, t: np.ndarray,
                          v: np.ndarray, delta: float = 1e-6) -> np.ndarray:
    """Derivative of the projection (hyperplane coordinates) at ``phi(y + t xi)``.

    Inverts the derivative of the parametrization, whose columns are central
    differences in the hyperplane coordinates and the curve velocity.
    """
    par = proj.param
    k, n = y.shape
    cols = []
    for j in range(n - 1):
        e = par.basis[:, j] * delta
        Xp, _ = par.phi(y + e, t)
        Xm, _ = par.phi(y - e, t)
        cols.append((Xp - Xm) / (2 * delta))
    D = np.stack(cols + [v], axis=-1)
    return np.linalg.inv(D)[:, : n - 1, :]


@dataclass
class DirectionWeight:
    """Normalized directional measure ``mu / (|velocity|_inf^2 Lip^(n-1))`` of a cell."""

    xi: np.ndarray
    mu: float
    vmax: float
    vmin: float
    lip: float
    jac_min: float

    @property
    def ratio(self) -> float:
        n = self.xi.size
        return self.mu / (self.vmax ** 2 * self.lip ** (n - 1))


def _direction_weight(u, proj, C: Box, h_y, h_t, use_analytic, q_probe: int = 5) -> DirectionWeight:
    pts = _lattice(C, q_probe)
    y, t, v, ok = proj.project(pts)
    if not ok.all():
        raise FamilyConstructionError("cell not covered by the projection")
    sp = np.linalg.norm(v, axis=1)
    # on a convex cell the Lipschitz constant is the largest derivative norm
    DP = projection_derivative(proj, y, t, v)
    lip = float(np.max(np.linalg.norm(DP, ord=2, axis=(1, 2))))
    jac = float(np.min(np.sqrt(np.abs(np.linalg.det(DP @ np.swapaxes(DP, 1, 2))))))
    # curves meeting C project inside the hull of the probe images, padded
    # by the probe spacing times the Lipschitz constant
    pad = 2 * max(lip, 1.0) * float(np.max(C.hi - C.lo)) / (q_probe - 1) + 2 * h_y
    c = proj.param.coords_from_y(y)
    tpad = 2 * float(np.max(C.hi - C.lo)) / (q_probe - 1) / max(float(sp.min()), 1e-12) + 2 * h_t
    mu = mu_xi_u(u, proj, h_y=h_y, region=C, h_t=h_t, use_analytic=use_analytic,
                 y_range=(c.min(axis=0) - pad, c.max(axis=0) + pad),
                 t_range=(float(t.min()) - tpad, float(t.max()) + tpad))
    return DirectionWeight(proj.xi.copy(), mu, float(sp.max()), float(sp.min()), lip, jac)


@dataclass
class CellBound:
    """Partition cell with its measure bound, deviation and integral of ``|e(u)|``."""

    box: Box
    lam: float
    eps: float
    best_xi: np.ndarray
    integral_op: float
    integral_frob: float
    weights: List[DirectionWeight] = field(repr=False, default_factory=list)
    family: Optional[ProjectionFamily] = field(repr=False, default=None)

    @property
    def factor(self) -> float:
        return (1 + self.eps) ** (self.box.dim + 3)

    def to_dict(self) -> dict:
        return {"lo": self.box.lo.tolist(), "hi": self.box.hi.tolist(), "lambda": self.lam,
                "eps": self.eps, "factor": self.factor, "best_xi": self.best_xi.tolist(),
                "integral_op": self.integral_op, "integral_frob": self.integral_frob}


def _refine_angle(make_weight, xi0: np.ndarray, half: float, iters: int) -> DirectionWeight:
    """Golden-section maximization of the normalized measure over angles (n = 2)."""
    th0 = float(np.arctan2(xi0[1], xi0[0]))
    g = (np.sqrt(5) - 1) / 2
    a, b = th0 - half, th0 + half
    cache = {}

    def val(th):
        if th not in cache:
            cache[th] = make_weight(np.array([np.cos(th), np.sin(th)]))
        return cache[th]

    c, d = b - g * (b - a), a + g * (b - a)
    for _ in range(iters):
        if val(c).ratio >= val(d).ratio:
            b, d = d, c
            c = b - g * (b - a)
        else:
            a, c = c, d
            d = a + g * (b - a)
    return max(cache.values(), key=lambda w: w.ratio)


def split_box(B: Box, cells: int) -> List[Box]:
    n = B.dim
    h = (B.hi - B.lo) / cells
    out = []
    for idx in np.ndindex(*([cells] * n)):
        lo = B.lo + np.array(idx) * h
        out.append(Box(lo, lo + h))
    return out


def cell_bound(u: GridField, F: QuadraticField, C: Box, n_dirs: Optional[int] = None,
               h_y: Optional[float] = None, h_t: Optional[float] = None,
               refine_iters: int = 8, quad_points: int = 4, use_analytic: bool = True,
               s: ODESettings = DEFAULT_SETTINGS, depth: int = 0, slack: float = 1e-2,
               atol: float = 1e-9, max_refine: int = 2) -> List[CellBound]:
    """Measure bound and integral of ``|e(u)|`` for one cell.

    A family centred at the cell covers its half-diagonal; when the family
    radius must shrink below it, the cell is split in ``2^n`` halves. A cell
    whose integral exceeds its bound is also split, up to ``max_refine``
    times: the finer partition is a larger lower realization of the bound.
    """
    r = 0.5 * C.diameter
    fam = build_family(F, C.center, 1.05 * r, n_dirs, s)
    if fam.R0 < r:
        if depth >= 3:
            raise FamilyConstructionError("cell too large for a covering family")
        return [cb for sub in split_box(C, 2)
                for cb in cell_bound(u, F, sub, n_dirs, h_y, h_t, refine_iters, quad_points,
                                     use_analytic, s, depth + 1, slack, atol, max_refine)]
    side = float(np.min(C.hi - C.lo))
    hy = side / 32 if h_y is None else h_y
    ht = side / 64 if h_t is None else h_t
    weights = [_direction_weight(u, p, C, hy, ht, use_analytic) for p in fam.projections]
    best = max(weights, key=lambda w: w.ratio)
    if C.dim == 2 and refine_iters > 0 and best.mu > 0:
        par = fam.projections[0].param

        def make_weight(xi):
            proj = CurvilinearProjection(build_parametrization(F, C.center, xi, par.rho, par.tau,
                                                               par.h_y, s))
            return _direction_weight(u, proj, C, hy, ht, use_analytic)

        cand = _refine_angle(make_weight, best.xi, np.pi / len(fam), refine_iters)
        if cand.ratio > best.ratio:
            best = cand
            weights.append(cand)
    eps = max(0.0, max(max(w.vmax - 1, 1 / w.vmin - 1, w.lip - 1, 1 / w.jac_min - 1)
                       for w in weights))
    X, vol = _midpoints(C, quad_points)
    reps = reconstruct_e_batch(u, X, fam, use_analytic=use_analytic, on_error="skip")
    op = sum(rp.e_of_u.op_norm for rp in reps if isinstance(rp, GradientReport)) * vol
    fro = sum(rp.e_of_u.frobenius for rp in reps if isinstance(rp, GradientReport)) * vol
    cb = CellBound(C, best.ratio, eps, best.xi, op, fro, weights, fam)
    if max_refine > 0 and op > cb.factor * cb.lam * (1 + slack) + atol:
        return [c for sub in split_box(C, 2)
                for c in cell_bound(u, F, sub, n_dirs, h_y, h_t, refine_iters, quad_points,
                                    use_analytic, s, depth, slack, atol, max_refine - 1)]
    return [cb]


@dataclass
class LambdaEstimate:
    """Partition sum of per-cell normalized measure suprema."""

    total: float
    cells: List[CellBound]
    single_family: float

    def to_dict(self) -> dict:
        return {"total": self.total, "single_family": self.single_family,
                "cells": [c.to_dict() for c in self.cells]}


def lambda_estimate(u: GridField, F: QuadraticField, B: Box, cells: int = 2,
                    n_dirs: Optional[int] = None, h_y: Optional[float] = None,
                    h_t: Optional[float] = None, refine_iters: int = 8,
                    quad_points: int = 4, use_analytic: bool = True,
                    s: ODESettings = DEFAULT_SETTINGS, single_family: bool = True,
                    threads: Optional[int] = None, slack: float = 1e-2, atol: float = 1e-9,
                    max_refine: int = 2) -> LambdaEstimate:
    """Lower realization of the smallest admissible measure on ``B``.

    ``B`` is split into ``cells^n`` boxes; each contributes the largest,
    over sampled and refined directions, of ``mu(C)`` divided by
    ``|velocity|_inf^2 Lip(P; C)^(n-1)``. With ``single_family`` the same
    supremum over one family centred at ``B`` is reported too. Cells failing
    the comparison with slack ``slack`` are refined (see ``cell_bound``).
    """
    parts = parallel_map(lambda C: cell_bound(u, F, C, n_dirs, h_y, h_t, refine_iters,
                                              quad_points, use_analytic, s, 0, slack, atol,
                                              max_refine),
                         split_box(B, cells), threads)
    flat = [c for p in parts for c in p]
    single = float("nan")
    if single_family:
        fam = build_family(F, B.center, 0.5 * B.diameter * 1.05, n_dirs, s)
        if fam.R0 >= 0.5 * B.diameter:
            side = float(np.min(B.hi - B.lo))
            hy = side / 64 if h_y is None else h_y
            ht = side / 128 if h_t is None else h_t
            single = max(_direction_weight(u, p, B, hy, ht, use_analytic).ratio
                         for p in fam.projections)
    return LambdaEstimate(float(sum(c.lam for c in flat)), flat, single)


@dataclass
class BoundReport:
    """Integral of ``|e(u)|`` against the measure bound, and slope-bound violations.

    ``certificate`` holds when on every cell
    ``int_C |e(u)|_op <= (1 + eps_C)^(n+3) lam(C) (1 + slack) + atol``.
    """

    integral_op: float
    integral_frob: float
    lam: float
    lam_single: float
    bound: float
    certificate: bool
    worst_cell_ratio: float
    slope_violation_rate: float
    slope_samples: int
    slack: float
    cells: List[CellBound]

    def to_dict(self) -> dict:
        return {"integral_op": self.integral_op, "integral_frob": self.integral_frob,
                "lambda": self.lam, "lambda_single_family": self.lam_single,
                "bound": self.bound, "certificate": self.certificate,
                "worst_cell_ratio": self.worst_cell_ratio,
                "slope_violation_rate": self.slope_violation_rate,
                "slope_samples": self.slope_samples, "slack": self.slack,
                "cells": [c.to_dict() for c in self.cells]}


def slope_violations(reports: Sequence[GradientReport], rtol: float = 1e-3,
                     atol: float = 1e-8) -> Tuple[int, int]:
    """Count rows with ``|d_k| > |e(u) w_k . w_k| + atol + rtol |d_k|``."""
    bad = tot = 0
    for rp in reports:
        if not isinstance(rp, GradientReport):
            continue
        pred = np.abs(np.einsum("ki,ij,kj->k", rp.velocities, rp.e_of_u.matrix(), rp.velocities))
        d = np.abs(rp.derivatives)
        bad += int(np.count_nonzero(d > pred + atol + rtol * d))
        tot += d.size
    return bad, tot


def bound_checks(u: GridField, F: QuadraticField, B: Box,
                 estimate: Optional[LambdaEstimate] = None, cells: int = 2,
                 slack: float = 1e-2, atol: float = 1e-9, slope_points: int = 6,
                 slope_rtol: float = 1e-3, use_analytic: bool = True,
                 n_dirs: Optional[int] = None, s: ODESettings = DEFAULT_SETTINGS,
                 threads: Optional[int] = None) -> BoundReport:
    """Compare the integral of ``|e(u)|`` over ``B`` with the measure bound.

    The slope bound is probed on a ``slope_points^n`` lattice inside ``B``
    with the family of the enclosing cell.
    """
    est = lambda_estimate(u, F, B, cells, n_dirs, use_analytic=use_analytic, s=s,
                          threads=threads, slack=slack, atol=atol) if estimate is None else estimate
    ok = True
    worst = 0.0
    for c in est.cells:
        bnd = c.factor * c.lam * (1 + slack) + atol
        ok &= c.integral_op <= bnd
        if bnd > 0:
            worst = max(worst, c.integral_op / bnd)
    bad = tot = 0
    for c in est.cells:
        fam = c.family
        if fam is None:
            fam = build_family(F, c.box.center, 0.5 * c.box.diameter * 1.05, n_dirs, s)
        X, _ = _midpoints(c.box, max(1, slope_points // cells))
        reps = reconstruct_e_batch(u, X, fam, use_analytic=use_analytic, on_error="skip")
        b, t = slope_violations(reps, slope_rtol)
        bad += b
        tot += t
    I_op = float(sum(c.integral_op for c in est.cells))
    I_fr = float(sum(c.integral_frob for c in est.cells))
    bound = float(sum(c.factor * c.lam for c in est.cells) * (1 + slack))
    return BoundReport(I_op, I_fr, est.total, est.single_family, bound, bool(ok), worst,
                       bad / tot if tot else 0.0, tot, slack, est.cells)


# ------------------------------------------------------------ shell strain

@dataclass
class ShellGradient:
    """Rescaled strain components at ``points``.

    ``e_ab`` has shape ``(k, 2, 2)``, ``e_a3`` ``(k, 2)`` and ``e_33`` ``(k,)``.
    """

    points: np.ndarray
    rho: float
    e_ab: np.ndarray
    e_a3: np.ndarray
    e_33: np.ndarray


def _shell_jacobian(u, X: np.ndarray, h: float) -> Tuple[np.ndarray, np.ndarray]:
    f = _as_callable(u)
    ux = f(X)
    J = np.zeros((X.shape[0], 3, 3))
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        J[:, i, :] = (f(X + e) - f(X - e)) / (2 * h)
    return ux, J


def shell_egradient(u, rho: float, theta, points=None, h: float = 1e-5) -> ShellGradient:
    """Leading-order rescaled shell strain of a displacement on ``U x (-1, 1)``.

    ``theta`` exposes ``gradient`` and ``hessian`` on planar points (for
    instance a QuadraticSurface). The transverse symbol is
    ``Gamma^3_ab = -Hess(theta)_ab / sqrt(1 + rho^2 |grad theta|^2)``; the
    in-plane and mixed symbols, of order ``rho^2``, are dropped. ``u`` is a
    vectorized callback or a GridField; ``points`` defaults to the grid
    nodes.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    if points is None:
        if not isinstance(u, GridField):
            raise ValueError("points are required for callback displacements")
        X = u.nodes().reshape(-1, 3)
        pad = 2 * h
        X = X[u.box.contains(X - pad) & u.box.contains(X + pad)]
    else:
        X = np.array(points, dtype=float, ndmin=2)
    ux, J = _shell_jacobian(u, X, h)
    xp = X[:, :2]
    grad = np.asarray(theta.gradient(xp), dtype=float)
    hess = np.asarray(theta.hessian(xp), dtype=float)
    gam3 = -hess / np.sqrt(1 + rho ** 2 * np.sum(grad ** 2, axis=1))[:, None, None]
    sym = 0.5 * (J + np.swapaxes(J, 1, 2))
    e_ab = sym[:, :2, :2] - ux[:, 2, None, None] * gam3
    e_a3 = sym[:, :2, 2] / rho
    e_33 = J[:, 2, 2] / rho ** 2
    return ShellGradient(X, rho, e_ab, e_a3, e_33)


def shell_limit(u, theta, points, h: float = 1e-5) -> np.ndarray:
    """Limit of the in-plane components as ``rho -> 0``: ``sym(Du)_ab + u_3 Hess(theta)_ab``."""
    X = np.array(points, dtype=float, ndmin=2)
    ux, J = _shell_jacobian(u, X, h)
    hess = np.asarray(theta.hessian(X[:, :2]), dtype=float)
    return 0.5 * (J + np.swapaxes(J, 1, 2))[:, :2, :2] + ux[:, 2, None, None] * hess
