"""Parametrizations, curvilinear projections and families of them.

For a unit direction ``xi`` and base point ``x0`` the parametrization sends
``y + t xi`` (``y`` orthogonal to ``xi``) to the time-``t`` point of the curve
solving ``u'' = F(u, u')`` with ``u(0) = x0 + y`` and ``u'(0) = xi``. The
projection is the inverse map followed by the orthogonal projection onto the
hyperplane orthogonal to ``xi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .field import Box, QuadraticField
from .geodesics import DEFAULT_SETTINGS, ODESettings, flow, sample_batch
from .parallel import parallel_map


class FamilyConstructionError(RuntimeError):
    """Radius shrank below the admissible floor while building a family."""


def orthonormal_complement(xi) -> np.ndarray:
    """Deterministic orthonormal basis (columns) of the hyperplane orthogonal to ``xi``."""
    xi = np.asarray(xi, dtype=float)
    n = xi.size
    if n == 1:
        return np.zeros((1, 0))
    if n == 2:
        return np.array([[-xi[1]], [xi[0]]])
    # Householder reflection mapping e_1 to xi
    e1 = np.zeros(n)
    e1[0] = 1.0
    w = xi - e1
    nw = np.linalg.norm(w)
    if nw < 1e-14:
        H = np.eye(n)
    else:
        w = w / nw
        H = np.eye(n) - 2.0 * np.outer(w, w)
    return H[:, 1:]


def sphere_directions(n: int, count: int, seed: int = 0) -> np.ndarray:
    """Deterministic quasi-uniform unit vectors.

    Equally spaced angles with a half-step offset for ``n = 2``, a Fibonacci
    spiral for ``n = 3`` and normalized seeded Gaussians otherwise.
    """
    if count < 1:
        raise ValueError("need at least one direction")
    if n == 1:
        return np.array([[1.0], [-1.0]])[: max(1, count)]
    if n == 2:
        th = 2 * np.pi * (np.arange(count) + 0.5) / count
        return np.column_stack([np.cos(th), np.sin(th)])
    if n == 3:
        k = np.arange(count) + 0.5
        z = 1 - 2 * k / count
        r = np.sqrt(np.clip(1 - z * z, 0, None))
        phi = np.pi * (3 - np.sqrt(5)) * k
        return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    g = np.random.default_rng(seed).standard_normal((count, n))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def default_n_dirs(n: int) -> int:
    return 2 * n * (n + 1)


@dataclass
class Parametrization:
    """Curves ``t -> phi(y + t xi)`` launched from ``x0 + y`` with velocity ``xi``.

    Stored trajectories on the base lattice only seed Newton inversions;
    every evaluation integrates a fresh curve.
    """

    F: QuadraticField
    x0: np.ndarray
    xi: np.ndarray
    rho: float
    tau: float
    h_y: Optional[float]
    settings: ODESettings
    basis: np.ndarray
    y_coords: np.ndarray
    t_grid: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    reduced: bool = False
    _tree: Optional[cKDTree] = field(default=None, repr=False)
    _seed_index: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.x0.size

    def y_from_coords(self, c) -> np.ndarray:
        return np.asarray(c, dtype=float) @ self.basis.T

    def coords_from_y(self, y) -> np.ndarray:
        return np.asarray(y, dtype=float) @ self.basis

    def phi(self, Y, T):
        """Points and velocities ``phi(y + t xi)`` for batches ``Y (k, n)``, ``T (k,)``.

        Uses the 2-homogeneity of F: launching with velocity ``t xi`` and
        integrating to time one lands at the time-``t`` point of the curve.
        """
        Y = np.array(Y, dtype=float, ndmin=2)
        T = np.atleast_1d(np.asarray(T, dtype=float))
        base = self.x0 + Y
        if self.F.is_zero:
            X = base + T[:, None] * self.xi
            V = np.broadcast_to(self.xi, X.shape).copy()
            bad = ~self.F.in_domain(X) | ~self.F.in_domain(base)
            X[bad] = np.nan
            V[bad] = np.nan
            return X, V
        res = flow(self.F, base, T[:, None] * self.xi, 1.0, self.settings)
        X, V = res.x, res.v
        small = np.abs(T) < 1e-300
        with np.errstate(invalid="ignore", divide="ignore"):
            V = V / np.where(small, 1.0, T)[:, None]
        V[small] = self.xi
        X[small] = base[small]
        return X, V

    def curve_samples(self, Y, t_samples):
        """Sample curves through ``x0 + Y`` at shared or per-curve times."""
        Y = np.array(Y, dtype=float, ndmin=2)
        V0 = np.broadcast_to(self.xi, Y.shape)
        return sample_batch(self.F, self.x0 + Y, V0, t_samples, self.settings)

    def _seeds(self, Xq: np.ndarray):
        k = Xq.shape[0]
        d = Xq - self.x0
        c0 = d @ self.basis
        t0 = d @ self.xi
        if self.F.is_zero or self._tree is None:
            return c0, t0, np.ones(k, dtype=bool)
        dist, j = self._tree.query(Xq)
        spacing = max(self.h_y or 0.0, float(np.max(np.diff(self.t_grid))))
        ok = dist <= 4.0 * spacing * (1.0 + np.nanmax(np.abs(self.velocities)))
        yi, ti = self._seed_index[j].T
        return self.y_coords[yi], self.t_grid[ti], ok

    def invert(self, Xq, max_iter: int = 40):
        """Batched inverse: ``(y, t, velocity, ok)`` with ``phi(y + t xi) = x``.

        ``y`` is returned as an ambient vector in the hyperplane orthogonal to
        ``xi``. Members outside the covered set or without convergence have
        ``ok = False`` and NaN outputs.
        """
        Xq = np.array(Xq, dtype=float, ndmin=2)
        k, n = Xq.shape
        if self.F.is_zero:
            d = Xq - self.x0
            t = d @ self.xi
            y = d - t[:, None] * self.xi
            V = np.broadcast_to(self.xi, Xq.shape).copy()
            ok = self._covered(y @ self.basis, t)
            return y, t, V, ok
        c, t, seeded = self._seeds(Xq)
        c = c.copy()
        t = t.copy()
        tol = self.settings.abs_tol
        conv = np.zeros(k, dtype=bool)
        vel = np.full((k, n), np.nan)
        active = np.flatnonzero(seeded)
        B = self.basis
        m1 = n - 1
        for _ in range(max_iter):
            if active.size == 0:
                break
            ca, ta = c[active], t[active]
            dlt = 1e-6 * np.maximum(1.0, np.abs(ca).max(axis=1, initial=0.0))
            Ys = [ca @ B.T]
            Ts = [ta]
            for j in range(m1):
                cj = ca.copy()
                cj[:, j] += dlt
                Ys.append(cj @ B.T)
                Ts.append(ta)
            X, V = self.phi(np.concatenate(Ys), np.concatenate(Ts))
            na = active.size
            X = X.reshape(m1 + 1, na, n)
            V = V.reshape(m1 + 1, na, n)
            r = X[0] - Xq[active]
            rn = np.linalg.norm(r, axis=1)
            fin = np.isfinite(rn) & np.all(np.isfinite(X), axis=(0, 2))
            vel[active] = V[0]
            done = fin & (rn <= tol)
            conv[active[done]] = True
            go = fin & ~done
            if not go.any():
                break
            J = np.empty((na, n, n))
            for j in range(m1):
                J[:, :, j] = (X[j + 1] - X[0]) / dlt[:, None]
            J[:, :, m1] = V[0]
            sub = np.flatnonzero(go)
            try:
                step = np.linalg.solve(J[sub], -r[sub][..., None])[..., 0]
            except np.linalg.LinAlgError:
                step = np.stack([np.linalg.lstsq(Jj, -rj, rcond=None)[0]
                                 for Jj, rj in zip(J[sub], r[sub])])
            lam = np.ones(sub.size)
            cur = rn[sub]
            pend = np.arange(sub.size)
            newc = ca[sub].copy()
            newt = ta[sub].copy()
            for _h in range(20):
                tc = ca[sub][pend] + lam[pend, None] * step[pend, :m1]
                tt = ta[sub][pend] + lam[pend] * step[pend, m1]
                Xt, _ = self.phi(tc @ B.T, tt)
                tn = np.linalg.norm(Xt - Xq[active[sub[pend]]], axis=1)
                better = np.isfinite(tn) & (tn < cur[pend])
                newc[pend[better]] = tc[better]
                newt[pend[better]] = tt[better]
                pend = pend[~better]
                if pend.size == 0:
                    break
                lam[pend] *= 0.5
            stalled = np.zeros(sub.size, dtype=bool)
            stalled[pend] = True
            c[active[sub]] = newc
            t[active[sub]] = newt
            floor_ok = stalled & (cur <= 100 * tol)
            conv[active[sub[floor_ok]]] = True
            active = active[sub[~stalled]]
        if active.size:
            # refresh velocities after the last update
            X, V = self.phi(c[active] @ B.T, t[active])
            vel[active] = V
            rn = np.linalg.norm(X - Xq[active], axis=1)
            conv[active[rn <= 100 * tol]] = True
        ok = conv & self._covered(c, t)
        y = c @ B.T
        y[~ok] = np.nan
        t = np.where(ok, t, np.nan)
        vel[~ok] = np.nan
        return y, t, vel, ok

    def _covered(self, c, t) -> np.ndarray:
        c = np.atleast_2d(c)
        rn = np.linalg.norm(c, axis=1) if c.shape[1] else np.zeros(c.shape[0])
        return (rn <= self.rho * (1 + 1e-12)) & (np.abs(t) <= self.tau * (1 + 1e-12))

    def velocity_at(self, x) -> np.ndarray:
        """Velocity of the parametrizing curve through ``x``."""
        y, t, v, ok = self.invert(x)
        if not ok[0]:
            from .geodesics import InversionError
            raise InversionError("point not covered by the parametrization")
        return v[0]


def _base_coords(m1: int, rho: float, h_y: float) -> np.ndarray:
    kmax = int(np.floor(rho / h_y + 1e-9))
    ax = np.arange(-kmax, kmax + 1) * h_y
    if m1 == 0:
        return np.zeros((1, 0))
    mesh = np.stack(np.meshgrid(*([ax] * m1), indexing="ij"), axis=-1).reshape(-1, m1)
    return mesh[np.linalg.norm(mesh, axis=1) <= rho * (1 + 1e-12)]


def build_parametrization(F: QuadraticField, x0, xi, rho: float, tau: float,
                          h_y: Optional[float] = None,
                          s: ODESettings = DEFAULT_SETTINGS,
                          h_t: Optional[float] = None) -> Parametrization:
    """Integrate the seed lattice of curves for direction ``xi``.

    ``h_y = None`` skips the lattice; inversions are then seeded from the
    straight-line guess, which suffices for small rescaled neighbourhoods.
    """
    x0 = np.asarray(x0, dtype=float)
    xi = np.asarray(xi, dtype=float)
    xi = xi / np.linalg.norm(xi)
    if rho <= 0 or tau <= 0 or (h_y is not None and h_y <= 0):
        raise ValueError("rho, tau and h_y must be positive")
    n = x0.size
    B = orthonormal_complement(xi)
    if h_y is None:
        coords = np.zeros((0, n - 1))
        t_grid = np.zeros(0)
        P = V = np.zeros((0, 0, n))
        return Parametrization(F, x0, xi, rho, tau, None, s, B, coords, t_grid, P, V)
    coords = _base_coords(n - 1, rho, h_y)
    dt = h_t if h_t is not None else h_y
    kt = int(np.ceil(tau / dt - 1e-9))
    t_grid = np.arange(-kt, kt + 1) * dt
    t_grid = np.clip(t_grid, -tau, tau)
    P, V = sample_batch(F, x0 + coords @ B.T, np.broadcast_to(xi, (coords.shape[0], n)),
                        t_grid, s)
    reduced = bool(np.isnan(P).any())
    param = Parametrization(F, x0, xi, rho, tau, h_y, s, B, coords, t_grid, P, V, reduced)
    if not F.is_zero:
        good = np.all(np.isfinite(P), axis=-1)
        yi, ti = np.nonzero(good)
        param._tree = cKDTree(P[yi, ti])
        param._seed_index = np.column_stack([yi, ti])
    return param


@dataclass
class CurvilinearProjection:
    """``P_xi`` and ``t^xi_x`` realized through a parametrization."""

    param: Parametrization

    @property
    def xi(self) -> np.ndarray:
        return self.param.xi

    def project(self, X):
        """Batched ``(P(x), t_x, velocity, ok)``."""
        return self.param.invert(X)

    def __call__(self, x) -> np.ndarray:
        y, _, _, ok = self.param.invert(x)
        return y[0] if np.ndim(x) == 1 else y


def invert_and_project(proj: CurvilinearProjection, x):
    """Return ``(y, t)`` with ``phi(y + t xi) = x`` for a single point."""
    from .geodesics import InversionError

    y, t, _, ok = proj.project(x)
    if not ok[0]:
        raise InversionError("point outside the covered region or no convergence")
    return y[0], float(t[0])


def velocity_at(param: Parametrization, x) -> np.ndarray:
    return param.velocity_at(x)


@dataclass
class ProjectionFamily:
    """Curvilinear projections for a sample of directions around ``x0``."""

    F: QuadraticField
    x0: np.ndarray
    R0: float
    directions: np.ndarray
    projections: List[CurvilinearProjection]
    settings: ODESettings

    @property
    def dim(self) -> int:
        return self.x0.size

    def __len__(self) -> int:
        return len(self.projections)

    def project_all(self, X):
        """For every direction: arrays ``y (N, k, n)``, ``t``, ``vel``, ``ok``."""
        X = np.array(X, dtype=float, ndmin=2)
        out = [p.project(X) for p in self.projections]
        y = np.stack([o[0] for o in out])
        t = np.stack([o[1] for o in out])
        v = np.stack([o[2] for o in out])
        ok = np.stack([o[3] for o in out])
        return y, t, v, ok


def _probe_points(x0: np.ndarray, R0: float) -> np.ndarray:
    n = x0.size
    pts = [x0]
    for i in range(n):
        e = np.zeros(n)
        e[i] = 0.9 * R0
        pts += [x0 + e, x0 - e]
    diag = np.ones(n) / np.sqrt(n) * 0.7 * R0
    pts += [x0 + diag, x0 - diag]
    return np.array(pts)


def build_family(F: QuadraticField, x0, R0_hint: float, n_dirs: Optional[int] = None,
                 s: ODESettings = DEFAULT_SETTINGS, h_y: Optional[float] = None,
                 round_trip_tol: float = 1e-7, directions=None,
                 threads: Optional[int] = None) -> ProjectionFamily:
    """Build one projection per sampled direction, shrinking ``R0`` until every
    member passes the round-trip check on a probe set of ``B_{R0}(x0)``.

    Radii follow ``rho = tau = 2 R0``.
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    if directions is None:
        if n_dirs is None:
            n_dirs = default_n_dirs(n)
        if n_dirs < n * (n + 1) // 2:
            raise ValueError("n_dirs must be at least n(n+1)/2")
        dirs = sphere_directions(n, n_dirs)
    else:
        dirs = np.asarray(directions, dtype=float)
        dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    R0 = float(R0_hint)
    while R0 >= 1e-3 * R0_hint:
        rho = tau = 2 * R0
        hy = h_y if h_y is not None else (rho / 8 if n == 2 else rho / 4)
        probes = _probe_points(x0, R0)

        def make(xi):
            return CurvilinearProjection(build_parametrization(F, x0, xi, rho, tau, hy, s))

        projs = parallel_map(make, list(dirs), threads)
        good = True
        for p in projs:
            y, t, _, ok = p.project(probes)
            if not ok.all():
                good = False
                break
            back, _ = p.param.phi(y, t)
            if np.max(np.linalg.norm(back - probes, axis=1)) > round_trip_tol:
                good = False
                break
        if good:
            return ProjectionFamily(F, x0, R0, dirs, projs, s)
        R0 *= 0.5
    raise FamilyConstructionError("R0 shrank below 1e-3 of the hint")


def direction_velocity_images(family: ProjectionFamily, x) -> np.ndarray:
    """Normalized velocities ``xi_phi(x)/|xi_phi(x)|`` for all family directions."""
    _, _, v, ok = family.project_all(np.asarray(x, dtype=float)[None])
    v = v[:, 0, :]
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# ----------------------------------------------------------- rescaled maps

@dataclass
class RescaledMaps:
    """``phi_r(x) = (phi(r x) - x0)/r`` and ``P_r(x) = P(x0 + r x)/r``."""

    param: Parametrization
    r: float
    sup_phi_deviation: float
    sup_P_deviation: float

    def phi_r(self, X) -> np.ndarray:
        X = np.array(X, dtype=float, ndmin=2)
        p = self.param
        rx = self.r * X
        t = rx @ p.xi
        y = rx - t[:, None] * p.xi
        pts, _ = p.phi(y, t)
        return (pts - p.x0) / self.r

    def P_r(self, X) -> np.ndarray:
        X = np.array(X, dtype=float, ndmin=2)
        y, _, _, ok = self.param.invert(self.param.x0 + self.r * X)
        return y / self.r


def unit_ball_probe(n: int, count: int = 64) -> np.ndarray:
    """Deterministic probe points filling the closed unit ball."""
    if n == 2:
        rs = np.array([0.25, 0.5, 0.75, 1.0])
        th = 2 * np.pi * np.arange(count // 4) / (count // 4)
        pts = [np.zeros(2)] + [r * np.array([np.cos(a), np.sin(a)]) for r in rs for a in th]
        return np.array(pts)
    dirs = sphere_directions(n, max(count // 4, 1))
    rs = np.array([0.25, 0.5, 0.75, 1.0])
    return np.concatenate([np.zeros((1, n))] + [r * dirs for r in rs])


def rescaled_family(F: QuadraticField, x0, r: float, xi,
                    s: ODESettings = DEFAULT_SETTINGS, probe=None) -> RescaledMaps:
    """Rescaled parametrization and projection at scale ``r`` with diagnostics
    ``sup |phi_r(x) - x|`` and ``sup |P_r(x) - pi_xi(x)|`` over the unit ball."""
    from .geodesics import NotDefinedError

    x0 = np.asarray(x0, dtype=float)
    xi = np.asarray(xi, dtype=float)
    xi = xi / np.linalg.norm(xi)
    param = build_parametrization(F, x0, xi, 2.0 * r, 2.0 * r, None, s)
    maps = RescaledMaps(param, r, np.nan, np.nan)
    pts = unit_ball_probe(x0.size) if probe is None else np.asarray(probe, dtype=float)
    ph = maps.phi_r(pts)
    if not np.all(np.isfinite(ph)):
        raise NotDefinedError("rescaled ball leaves the field domain")
    pr = maps.P_r(pts)
    proj = pts - np.outer(pts @ xi, xi)
    maps.sup_phi_deviation = float(np.max(np.linalg.norm(ph - pts, axis=1)))
    maps.sup_P_deviation = float(np.nanmax(np.linalg.norm(pr - proj, axis=1)))
    return maps


# ---------------------------------------------------------- transversality

@dataclass
class TransversalityReport:
    """Finite-difference probes of the transversality conditions."""

    h1_first: float
    h1_second: float
    h2_margin: dict
    h3_first: float
    h3_second: float
    n_directions: int
    n_pairs: int
    passed: bool
    thresholds: dict


def _tangent_perturbed(xi: np.ndarray, delta: float):
    """Directions ``xi`` perturbed along a tangent basis: centre, +/- per axis."""
    B = orthonormal_complement(xi)
    out = [xi]
    for j in range(B.shape[1]):
        for sgn in (1.0, -1.0):
            v = xi + sgn * delta * B[:, j]
            out.append(v / np.linalg.norm(v))
    return out


def transversality_probe(family: ProjectionFamily, n_pairs: int = 8, n_xi: int = 9,
                         c_values: Sequence[float] = (0.05, 0.1, 0.2),
                         delta: float = 1e-3, seed: int = 0,
                         bound_max: float = 1e3, margin_min: float = 1e-3,
                         radius: Optional[float] = None) -> TransversalityReport:
    """Probe (H.1)-(H.3) for ``P^i_xi = pi_{e_i} o P_xi`` on ``|xi . e_i| >= 1/sqrt(n)``.

    Derivatives in ``xi`` are central differences along a tangent basis with
    step ``delta``. Pairs ``(x, x')`` are drawn from ``B_radius(x0)``.
    """
    F, x0 = family.F, family.x0
    n = x0.size
    rng = np.random.default_rng(seed)
    R = family.R0 if radius is None else radius
    u = rng.standard_normal((2 * n_pairs, n))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    rad = R * rng.uniform(0.1, 0.9, size=(2 * n_pairs, 1)) ** (1.0 / n)
    pts = x0 + u * rad
    xa, xb = pts[:n_pairs], pts[n_pairs:]
    dist = np.linalg.norm(xa - xb, axis=1)
    pool = sphere_directions(n, max(8 * n_xi, 64))
    h1a = h1b = h3a = h3b = 0.0
    margins = {c: np.inf for c in c_values}
    n_dir_used = 0
    cache = {}

    def P_at(xi):
        key = tuple(np.round(xi, 15))
        if key not in cache:
            param = build_parametrization(F, x0, xi, 2 * family.R0, 2 * family.R0, None,
                                          family.settings)
            y, _, _, ok = param.invert(pts)
            cache[key] = y
        return cache[key]

    for i in range(n):
        Si = pool[np.abs(pool[:, i]) >= 1 / np.sqrt(n) - 1e-12][:n_xi]
        keep = [j for j in range(n) if j != i]
        for xi in Si:
            n_dir_used += 1
            dirs = _tangent_perturbed(xi, delta)
            vals = [P_at(d)[:, keep] for d in dirs]
            base = vals[0]
            m1 = n - 1
            D1 = np.stack([(vals[1 + 2 * j] - vals[2 + 2 * j]) / (2 * delta)
                           for j in range(m1)], axis=-1)
            D2 = np.stack([(vals[1 + 2 * j] - 2 * base + vals[2 + 2 * j]) / delta ** 2
                           for j in range(m1)], axis=-1)
            h1a = max(h1a, float(np.nanmax(np.linalg.norm(D1, axis=(1, 2)))))
            h1b = max(h1b, float(np.nanmax(np.linalg.norm(D2, axis=(1, 2)))))
            T = (base[:n_pairs] - base[n_pairs:]) / dist[:, None]
            DT = (D1[:n_pairs] - D1[n_pairs:]) / dist[:, None, None]
            D2T = (D2[:n_pairs] - D2[n_pairs:]) / dist[:, None, None]
            h3a = max(h3a, float(np.nanmax(np.linalg.norm(DT, axis=(1, 2)))))
            h3b = max(h3b, float(np.nanmax(np.linalg.norm(D2T, axis=(1, 2)))))
            J = np.abs(np.linalg.det(DT))
            Tn = np.linalg.norm(T, axis=1)
            for c in c_values:
                sel = Tn <= c
                if sel.any():
                    margins[c] = min(margins[c], float(np.min(J[sel])))
    finite = all(np.isfinite(v) for v in (h1a, h1b, h3a, h3b))
    bounded = finite and max(h1a, h1b, h3a, h3b) <= bound_max
    margin_ok = margins[min(c_values)] > margin_min
    return TransversalityReport(h1a, h1b, margins, h3a, h3b, n_dir_used, n_pairs,
                                bool(bounded and margin_ok),
                                {"bound_max": bound_max, "margin_min": margin_min})


def lipschitz_estimate(proj: CurvilinearProjection, U: Box, n_pairs: int = 200,
                       seed: int = 0, points=None) -> float:
    """Largest sampled ``|P(x) - P(x')| / |x - x'|`` over pairs in the box ``U``.

    Pairs come from a point cloud (given, or seeded uniform samples) and from
    chords of a quarter box width along a basis of the hyperplane, the
    direction itself and random unit vectors.
    """
    rng = np.random.default_rng(seed)
    n = U.dim
    if points is None:
        pts = U.lo + (U.hi - U.lo) * rng.uniform(size=(max(2, int(np.sqrt(2 * n_pairs)) + 1), n))
    else:
        pts = np.asarray(points, dtype=float)
        pts = pts[U.contains(pts)]
    ia, ib = np.triu_indices(pts.shape[0], k=1)
    A, Bp = pts[ia], pts[ib]
    width = 0.25 * float(np.min(U.hi - U.lo))
    xi = proj.xi
    chords = np.concatenate([orthonormal_complement(xi).T, xi[None],
                             _unit_rows(rng.standard_normal((4, n)))])
    starts = pts[: min(len(pts), 16)]
    ca = np.repeat(starts, len(chords), axis=0)
    cb = ca + width * np.tile(chords, (len(starts), 1))
    inside = U.contains(cb)
    cb2 = ca - width * np.tile(chords, (len(starts), 1))
    cb = np.where(inside[:, None], cb, cb2)
    inside = U.contains(cb)
    A = np.concatenate([A, ca[inside]])
    Bp = np.concatenate([Bp, cb[inside]])
    allpts = np.concatenate([A, Bp])
    y, _, _, ok = proj.project(allpts)
    ya, yb = y[: len(A)], y[len(A):]
    good = ok[: len(A)] & ok[len(A):]
    d = np.linalg.norm(A - Bp, axis=1)
    good &= d > 0
    ratios = np.linalg.norm(ya - yb, axis=1)[good] / d[good]
    return float(np.max(ratios)) if ratios.size else float("nan")


def _unit_rows(M: np.ndarray) -> np.ndarray:
    return M / np.linalg.norm(M, axis=1, keepdims=True)


def projection_table(family: ProjectionFamily):
    """Long table ``(xi index, y index, t, x..., velocity...)`` of stored curves."""
    n = family.dim
    rows = []
    for k, p in enumerate(family.projections):
        par = p.param
        for yi in range(par.positions.shape[0]):
            for ti, t in enumerate(par.t_grid):
                x = par.positions[yi, ti]
                if np.all(np.isfinite(x)):
                    rows.append([k, yi, t, *x, *par.velocities[yi, ti]])
    header = (["xi_index", "y_index", "t"] + [f"x_{i + 1}" for i in range(n)]
              + [f"v_{i + 1}" for i in range(n)])
    return header, np.array(rows)
