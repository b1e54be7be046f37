"""Integration of x'' = F(x, x'), exponential map, inverse and normal maps.

The integrator advances a whole batch of initial conditions with shared
steps, which keeps finite-difference Jacobians of flow maps smooth and lets
the expensive parts of the package run as a few large numpy operations.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .field import QuadraticField


class StiffnessError(RuntimeError):
    """Step size underflow during integration."""


class NotDefinedError(RuntimeError):
    """The exponential map is not defined (trajectory left the domain)."""


class InversionError(RuntimeError):
    """Newton iteration for an inverse map did not converge."""


class OutOfBallError(InversionError):
    """Target lies outside the admissible inversion ball."""


class BVPError(RuntimeError):
    """Shooting for a two-point boundary value problem failed."""


@dataclass(frozen=True)
class ODESettings:
    """Integrator settings.

    ``method`` is ``"dopri5"`` (adaptive embedded 5(4) pair) or ``"rk4"``
    (fixed step ``fixed_step``, bit-reproducible across batch layouts).
    ``abs_tol`` doubles as the residual tolerance of Newton inversions.
    """

    rel_tol: float = 1e-9
    abs_tol: float = 1e-10
    max_step: float = 0.1
    method: str = "dopri5"
    fixed_step: float = 1e-3
    min_step: float = 1e-12
    max_steps: int = 200000

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0 or self.max_step <= 0:
            raise ValueError("tolerances and max_step must be positive")
        if self.method not in ("dopri5", "rk4"):
            raise ValueError(f"unknown method {self.method!r}")


DEFAULT_SETTINGS = ODESettings()

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])


def _hermite(s, h, x0, v0, a0, x1, v1, a1):
    """Quintic Hermite interpolant of position and its derivative on one step."""
    s2, s3 = s * s, s * s * s
    s4, s5 = s3 * s, s3 * s2
    p = ((1 - 10 * s3 + 15 * s4 - 6 * s5) * x0
         + h * (s - 6 * s3 + 8 * s4 - 3 * s5) * v0
         + h * h * (0.5 * s2 - 1.5 * s3 + 1.5 * s4 - 0.5 * s5) * a0
         + (10 * s3 - 15 * s4 + 6 * s5) * x1
         + h * (-4 * s3 + 7 * s4 - 3 * s5) * v1
         + h * h * (0.5 * s3 - s4 + 0.5 * s5) * a1)
    dp = ((-30 * s2 + 60 * s3 - 30 * s4) * x0
          + h * (1 - 18 * s2 + 32 * s3 - 15 * s4) * v0
          + h * h * (s - 4.5 * s2 + 6 * s3 - 2.5 * s4) * a0
          + (30 * s2 - 60 * s3 + 30 * s4) * x1
          + h * (-12 * s2 + 28 * s3 - 15 * s4) * v1
          + h * h * (1.5 * s2 - 4 * s3 + 2.5 * s4) * a1) / h
    return p, dp


@dataclass
class FlowResult:
    """Outcome of a batch integration from t=0 to ``t_end``.

    ``x``/``v`` hold the final states (NaN for members that left the domain),
    ``t_reached`` the last time each member was known inside the domain, and
    ``x_eval``/``v_eval`` the dense-output samples requested via ``t_eval``.
    """

    x: np.ndarray
    v: np.ndarray
    alive: np.ndarray
    t_reached: np.ndarray
    x_eval: Optional[np.ndarray] = None
    v_eval: Optional[np.ndarray] = None
    steps: Optional[list] = None


def flow(F: QuadraticField, X0, V0, t_end: float, s: ODESettings = DEFAULT_SETTINGS,
         t_eval=None, store: bool = False) -> FlowResult:
    """Integrate a batch of trajectories from time 0 to ``t_end``.

    Parameters
    ----------
    X0, V0 : array (m, n)
    t_end : float
        May be negative (backward integration).
    t_eval : array (q,) or (m, q), optional
        Times in ``[min(0, t_end), max(0, t_end)]`` at which to sample the
        dense output. Samples past a member's domain exit are NaN.
    store : bool
        Keep per-step states for later dense evaluation (small batches only).
    """
    X = np.array(X0, dtype=float, ndmin=2)
    V = np.array(V0, dtype=float, ndmin=2)
    m, n = X.shape
    alive = F.in_domain(X).copy()
    t_reached = np.zeros(m)
    x_eval = v_eval = None
    if t_eval is not None:
        te = np.asarray(t_eval, dtype=float)
        te = np.broadcast_to(te, (m, te.shape[-1])) if te.ndim == 1 else te
        q = te.shape[1]
        x_eval = np.full((m, q, n), np.nan)
        v_eval = np.full((m, q, n), np.nan)
        at0 = (te == 0.0) & alive[:, None]
        ii, jj = np.nonzero(at0)
        x_eval[ii, jj] = X[ii]
        v_eval[ii, jj] = V[ii]
    steps = [] if store else None

    if F.is_zero:
        # straight lines, evaluated in closed form
        if t_eval is not None:
            x_eval = X[:, None, :] + te[..., None] * V[:, None, :]
            v_eval = np.broadcast_to(V[:, None, :], x_eval.shape).copy()
            bad = ~F.in_domain(x_eval) | ~alive[:, None]
            x_eval[bad] = np.nan
            v_eval[bad] = np.nan
        Xe = X + t_end * V
        ok = alive & F.in_domain(Xe)
        if store:
            steps.append((0.0, t_end, X.copy(), V.copy(), np.zeros_like(X),
                          Xe.copy(), V.copy(), np.zeros_like(X)))
        t_reached[ok] = t_end
        Xe[~ok] = np.nan
        Vout = V.copy()
        Vout[~ok] = np.nan
        return FlowResult(Xe, Vout, ok, t_reached, x_eval, v_eval, steps)

    if t_end == 0.0:
        return FlowResult(X.copy(), V.copy(), alive, t_reached, x_eval, v_eval, steps)

    direction = 1.0 if t_end > 0 else -1.0
    T = abs(t_end)
    t = 0.0
    h_exit = max(s.min_step, 1e-6 * T)

    def accel(x, v):
        return F.eval_unchecked(x, v)

    idx = np.flatnonzero(alive)
    A = np.zeros_like(X)
    if idx.size:
        A[idx] = accel(X[idx], V[idx])

    if s.method == "rk4":
        nsteps = max(1, int(math.ceil(T / s.fixed_step - 1e-12)))
        h_fixed = T / nsteps
        h = h_fixed
    else:
        h = min(s.max_step, T, s.rel_tol ** 0.2)
    n_taken = 0
    while t < T and idx.size:
        if n_taken > s.max_steps:
            raise StiffnessError("maximum number of steps exceeded")
        h = min(h, T - t)
        hs = direction * h
        x, v, a = X[idx], V[idx], A[idx]
        out_of_domain = None
        if s.method == "rk4":
            k1x, k1v = v, a
            p2x, p2v = x + 0.5 * hs * k1x, v + 0.5 * hs * k1v
            ok2 = F.in_domain(p2x)
            k2x, k2v = p2v, accel(p2x, p2v) if ok2.all() else None
            if k2v is None:
                out_of_domain = ~ok2
            else:
                p3x, p3v = x + 0.5 * hs * k2x, v + 0.5 * hs * k2v
                ok3 = F.in_domain(p3x)
                if not ok3.all():
                    out_of_domain = ~ok3
                else:
                    k3x, k3v = p3v, accel(p3x, p3v)
                    p4x, p4v = x + hs * k3x, v + hs * k3v
                    ok4 = F.in_domain(p4x)
                    if not ok4.all():
                        out_of_domain = ~ok4
                    else:
                        k4x, k4v = p4v, accel(p4x, p4v)
                        xn = x + hs / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
                        vn = v + hs / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
                        okn = F.in_domain(xn)
                        if not okn.all():
                            out_of_domain = ~okn
                        else:
                            an = accel(xn, vn)
            accept = out_of_domain is None
        else:
            kx = [v]
            kv = [a]
            for st in range(1, 7):
                coef = _A[st]
                px = x + hs * sum(c * k for c, k in zip(coef, kx) if c != 0.0)
                pv = v + hs * sum(c * k for c, k in zip(coef, kv) if c != 0.0)
                ok = F.in_domain(px)
                if not ok.all():
                    out_of_domain = ~ok
                    break
                kx.append(pv)
                kv.append(accel(px, pv))
            accept = False
            if out_of_domain is None:
                xn, vn = px, pv
                an = kv[6]
                ex = hs * sum(c * k for c, k in zip(_E, kx) if c != 0.0)
                ev = hs * sum(c * k for c, k in zip(_E, kv) if c != 0.0)
                sx = s.abs_tol + s.rel_tol * np.maximum(np.abs(x), np.abs(xn))
                sv = s.abs_tol + s.rel_tol * np.maximum(np.abs(v), np.abs(vn))
                err = np.sqrt(0.5 * (np.mean((ex / sx) ** 2, axis=1)
                                     + np.mean((ev / sv) ** 2, axis=1)))
                err_max = float(np.max(err)) if err.size else 0.0
                if not np.isfinite(err_max):
                    err_max = 1e10
                accept = err_max <= 1.0
                fac = 0.9 * err_max ** -0.2 if err_max > 0 else 5.0
                h_next = h * min(5.0, max(0.2, fac))
                h_next = min(h_next, s.max_step)
        if out_of_domain is not None:
            if s.method == "dopri5" and h > h_exit:
                h = max(0.5 * h, h_exit)
                continue
            # members leaving the domain stop at the current time
            gone = idx[out_of_domain]
            alive[gone] = False
            X[gone] = np.nan
            V[gone] = np.nan
            idx = np.flatnonzero(alive)
            continue
        if not accept:
            h = h_next
            if h < s.min_step:
                raise StiffnessError("step size underflow")
            continue
        t_new = t + h
        if t_eval is not None:
            _fill_dense(te, direction, t, t_new, h, idx, x, v, a, xn, vn, an, x_eval, v_eval)
        if store:
            steps.append((direction * t, direction * t_new, x.copy(), v.copy(), a.copy(),
                          xn.copy(), vn.copy(), an.copy(), idx.copy()))
        X[idx], V[idx], A[idx] = xn, vn, an
        t_reached[idx] = direction * t_new
        t = t_new
        n_taken += 1
        if s.method == "dopri5":
            h = h_next
        else:
            h = h_fixed
    return FlowResult(X, V, alive, t_reached, x_eval, v_eval, steps)


def _fill_dense(te, direction, t0, t1, h, idx, x, v, a, xn, vn, an, x_eval, v_eval):
    sub = te[idx] * direction
    hit = (sub > t0) & (sub <= t1 * (1 + 1e-15) + 1e-300)
    if not hit.any():
        return
    rows, cols = np.nonzero(hit)
    sv = (sub[rows, cols] - t0) / h
    sv = np.clip(sv, 0.0, 1.0)[:, None]
    hs = direction * h
    p, dp = _hermite(sv, hs, x[rows], v[rows], a[rows], xn[rows], vn[rows], an[rows])
    x_eval[idx[rows], cols] = p
    v_eval[idx[rows], cols] = dp


# ----------------------------------------------------------- trajectories

@dataclass
class Trajectory:
    """Single integrated curve with dense evaluation.

    ``t_samples`` are the accepted step times in increasing order; positions
    and velocities are the states there. ``truncated`` marks a curve that left
    the field's domain before the requested span ended.
    """

    t_samples: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    accelerations: np.ndarray
    truncated: bool = False

    @property
    def t_span(self):
        return float(self.t_samples[0]), float(self.t_samples[-1])

    def dense_eval(self, t):
        """Return ``(x(t), x'(t))`` for scalar or array ``t`` inside the span."""
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        tt = np.atleast_1d(t)
        ts = self.t_samples
        if np.any(tt < ts[0] - 1e-12) or np.any(tt > ts[-1] + 1e-12):
            raise ValueError("dense_eval outside the trajectory span")
        k = np.clip(np.searchsorted(ts, tt, side="right") - 1, 0, len(ts) - 2)
        h = ts[k + 1] - ts[k]
        sv = ((tt - ts[k]) / h)[:, None]
        hh = h[:, None]
        P, Vv, Ac = self.positions, self.velocities, self.accelerations
        p, dp = _hermite(sv, hh, P[k], Vv[k], Ac[k], P[k + 1], Vv[k + 1], Ac[k + 1])
        if scalar:
            return p[0], dp[0]
        return p, dp

    def ode_residual(self, F: QuadraticField) -> float:
        """Max ``|x'' - F(x, x')|`` at step midpoints, x'' by differencing x'."""
        ts = self.t_samples
        mid = 0.5 * (ts[:-1] + ts[1:])
        dt = 1e-3 * np.min(np.diff(ts))
        _, v1 = self.dense_eval(np.clip(mid + dt, ts[0], ts[-1]))
        _, v0 = self.dense_eval(np.clip(mid - dt, ts[0], ts[-1]))
        x, v = self.dense_eval(mid)
        acc = (v1 - v0) / (2 * dt)
        return float(np.max(np.abs(acc - F.eval_unchecked(x, v))))

    def to_csv_rows(self):
        n = self.positions.shape[1]
        header = ["t"] + [f"x_{i + 1}" for i in range(n)] + [f"v_{i + 1}" for i in range(n)]
        rows = np.column_stack([self.t_samples, self.positions, self.velocities])
        return header, rows


def _line_exit_time(F: QuadraticField, x0, v0, end: float) -> float:
    """Largest time in ``[0, end]`` (or ``[end, 0]``) keeping the line in the box."""
    if F.domain is None:
        return end
    sign = 1.0 if end > 0 else -1.0
    reach = abs(end)
    vel = sign * v0
    for lo, hi, x, v in zip(F.domain.lo, F.domain.hi, x0, vel):
        if v > 0:
            reach = min(reach, (hi - x) / v)
        elif v < 0:
            reach = min(reach, (lo - x) / v)
    return sign * max(reach, 0.0)


def _collect(res: FlowResult, x0, v0, a0):
    ts = [0.0]
    xs, vs, as_ = [x0], [v0], [a0]
    for (t0, t1, x, v, a, xn, vn, an, *rest) in res.steps:
        ts.append(t1)
        xs.append(xn[0])
        vs.append(vn[0])
        as_.append(an[0])
    return np.array(ts), np.array(xs), np.array(vs), np.array(as_)


def integrate(F: QuadraticField, x0, v0, t_span, s: ODESettings = DEFAULT_SETTINGS) -> Trajectory:
    """Integrate one trajectory over ``t_span = (t0, t1)`` with ``t0 <= 0 <= t1``.

    A trajectory that leaves the field domain is returned truncated at the
    last step inside it, with ``truncated=True``.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not (t0 <= 0.0 <= t1) or t0 == t1:
        raise ValueError("t_span must contain 0 and have positive length")
    x0 = np.asarray(x0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    F.check_domain(x0)
    a0 = F.eval_unchecked(x0, v0)
    parts_t, parts_x, parts_v, parts_a = [], [], [], []
    truncated = False
    for end in (t0, t1):
        if end == 0.0:
            continue
        if F.is_zero:
            reach = _line_exit_time(F, x0, v0, end)
            truncated = truncated or abs(reach) < abs(end)
            ts = np.array([0.0, reach]) if reach != 0.0 else np.array([0.0])
            xs = x0[None] + ts[:, None] * v0[None]
            vs = np.repeat(v0[None], len(ts), axis=0)
            as_ = np.zeros_like(vs)
        else:
            res = flow(F, x0[None], v0[None], end, s, store=True)
            ts, xs, vs, as_ = _collect(res, x0, v0, a0)
            truncated = truncated or not res.alive[0]
        if end < 0:
            ts, xs, vs, as_ = ts[::-1], xs[::-1], vs[::-1], as_[::-1]
            parts_t.insert(0, ts[:-1])
            parts_x.insert(0, xs[:-1])
            parts_v.insert(0, vs[:-1])
            parts_a.insert(0, as_[:-1])
        else:
            parts_t.append(ts)
            parts_x.append(xs)
            parts_v.append(vs)
            parts_a.append(as_)
    t = np.concatenate(parts_t) if parts_t else np.array([0.0])
    if t1 == 0.0:
        t = np.concatenate([t, [0.0]])
        parts_x.append(x0[None])
        parts_v.append(v0[None])
        parts_a.append(a0[None])
    X = np.concatenate(parts_x)
    V = np.concatenate(parts_v)
    Acc = np.concatenate(parts_a)
    if len(t) < 2:
        raise NotDefinedError("trajectory leaves the domain immediately")
    return Trajectory(t, X, V, Acc, truncated)


def integrate_batch(F: QuadraticField, X0, V0, t_end: float,
                    s: ODESettings = DEFAULT_SETTINGS) -> FlowResult:
    """Final states of a batch of trajectories at ``t_end`` (input order kept)."""
    return flow(F, X0, V0, t_end, s)


def sample_batch(F: QuadraticField, X0, V0, t_samples, s: ODESettings = DEFAULT_SETTINGS):
    """Positions and velocities at times ``t_samples`` (shared or per member).

    Times may be negative and positive; both directions are integrated.
    Returns arrays of shape (m, q, n) with NaN where a curve left the domain.
    """
    X0 = np.array(X0, dtype=float, ndmin=2)
    V0 = np.array(V0, dtype=float, ndmin=2)
    m, n = X0.shape
    ts = np.asarray(t_samples, dtype=float)
    ts = np.broadcast_to(ts, (m, ts.shape[-1])) if ts.ndim == 1 else ts
    Xo = np.full(ts.shape + (n,), np.nan)
    Vo = np.full(ts.shape + (n,), np.nan)
    for sign in (1.0, -1.0):
        sel = ts * sign >= 0
        if not sel.any():
            continue
        tmax = float(np.max(np.abs(ts[sel])))
        te = np.where(sel, ts, 0.0)
        res = flow(F, X0, V0, sign * tmax if tmax > 0 else 0.0, s, t_eval=te)
        Xo[sel] = res.x_eval[sel]
        Vo[sel] = res.v_eval[sel]
    return Xo, Vo


# ---------------------------------------------------------- exponential map

def exp_map_batch(F: QuadraticField, x0, xi, s: ODESettings = DEFAULT_SETTINGS):
    """``exp_{x0}(xi)`` for a batch of base points and vectors; returns (x, v, ok)."""
    X0 = np.array(x0, dtype=float, ndmin=2)
    XI = np.array(xi, dtype=float, ndmin=2)
    X0 = np.broadcast_to(X0, XI.shape) if X0.shape[0] == 1 else X0
    res = flow(F, X0, XI, 1.0, s)
    return res.x, res.v, res.alive


def exp_map(F: QuadraticField, x0, xi, s: ODESettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Time-one point of the trajectory leaving ``x0`` with velocity ``xi``."""
    x0 = np.asarray(x0, dtype=float)
    xi = np.asarray(xi, dtype=float)
    F.check_domain(x0)
    if F.is_zero:
        out = x0 + xi
        if not F.in_domain(out):
            raise NotDefinedError("exp leaves the domain")
        return out
    x, _, ok = exp_map_batch(F, x0, xi, s)
    if not ok[0]:
        raise NotDefinedError("trajectory leaves the domain before t=1")
    return x[0]


def newton_shoot(F: QuadraticField, X0, targets, guess, s: ODESettings = DEFAULT_SETTINGS,
                 max_iter: int = 50):
    """Batched damped Newton for ``exp_{X0}(xi) = targets``.

    Jacobians use forward differences with step ``max(1e-6, 1e-6 |xi|)``;
    each member integrates together with its perturbations so that all
    differences share one step sequence. Returns ``(xi, residual, converged)``.
    """
    X0 = np.array(X0, dtype=float, ndmin=2)
    Y = np.array(targets, dtype=float, ndmin=2)
    xi = np.array(guess, dtype=float, ndmin=2).copy()
    m, n = xi.shape
    X0 = np.broadcast_to(X0, (m, n))
    tol = s.abs_tol
    eye = np.eye(n)

    def evaluate(xi_b, active):
        k = active.size
        d = np.maximum(1e-6, 1e-6 * np.linalg.norm(xi_b, axis=1))
        pert = xi_b[:, None, :] + d[:, None, None] * eye[None]
        allxi = np.concatenate([xi_b[:, None, :], pert], axis=1).reshape(-1, n)
        base = np.repeat(X0[active], n + 1, axis=0)
        x, _, ok = exp_map_batch(F, base, allxi, s)
        x = x.reshape(k, n + 1, n)
        ok = ok.reshape(k, n + 1).all(axis=1)
        J = (x[:, 1:, :] - x[:, :1, :]) / d[:, None, None]
        return x[:, 0, :], np.swapaxes(J, 1, 2), ok

    def value(xi_b, active):
        x, _, ok = exp_map_batch(F, X0[active], xi_b, s)
        return x, ok

    # shrink guesses whose trajectory leaves the domain before t=1
    _, ok0 = value(xi, np.arange(m))
    for _ in range(40):
        if ok0.all():
            break
        bad = np.flatnonzero(~ok0)
        xi[bad] *= 0.5
        _, ok_b = value(xi[bad], bad)
        ok0[bad] = ok_b

    res = np.full(m, np.inf)
    conv = np.zeros(m, dtype=bool)
    active = np.arange(m)
    for _ in range(max_iter):
        if active.size == 0:
            break
        xa = xi[active]
        val, J, ok = evaluate(xa, active)
        r = val - Y[active]
        rn = np.linalg.norm(r, axis=1)
        rn[~ok] = np.inf
        res[active] = rn
        done = rn <= tol
        conv[active[done]] = True
        keep = ~done & ok
        if not keep.any():
            active = active[keep]
            break
        active_k = active[keep]
        try:
            step = np.linalg.solve(J[keep], -r[keep][..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.stack([np.linalg.lstsq(Jk, -rk, rcond=None)[0]
                             for Jk, rk in zip(J[keep], r[keep])])
        lam = np.ones(active_k.size)
        cur = rn[keep]
        pending = np.arange(active_k.size)
        new_xi = xa[keep].copy()
        for _half in range(30):
            trial = xa[keep][pending] + lam[pending, None] * step[pending]
            tv, tok = value(trial, active_k[pending])
            tn = np.linalg.norm(tv - Y[active_k[pending]], axis=1)
            tn[~tok] = np.inf
            better = tn < cur[pending]
            new_xi[pending[better]] = trial[better]
            res[active_k[pending[better]]] = tn[better]
            pending = pending[~better]
            if pending.size == 0:
                break
            lam[pending] *= 0.5
        stalled = np.zeros(active_k.size, dtype=bool)
        stalled[pending] = True
        xi[active_k] = new_xi
        # a stalled member sits at the noise floor of the shooting map
        floor_ok = stalled & (cur <= 100 * tol)
        conv[active_k[floor_ok]] = True
        active = active_k[~stalled]
    return xi, res, conv


def exp_inverse(F: QuadraticField, x0, x, s: ODESettings = DEFAULT_SETTINGS,
                max_radius: Optional[float] = None) -> np.ndarray:
    """Vector ``xi`` with ``exp_{x0}(xi) = x``, by damped Newton from ``x - x0``."""
    x0 = np.asarray(x0, dtype=float)
    x = np.asarray(x, dtype=float)
    if F.is_zero:
        out = x - x0
    else:
        xi, res, conv = newton_shoot(F, x0, x, x - x0, s)
        if not conv[0]:
            raise InversionError(f"Newton did not converge (residual {res[0]:.3e})")
        out = xi[0]
    if max_radius is not None and np.linalg.norm(out) > max_radius:
        raise OutOfBallError("target lies outside the inversion ball")
    return out


def exp_jacobian(F: QuadraticField, x0, xi, s: ODESettings = DEFAULT_SETTINGS,
                 step: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobian of ``exp_{x0}`` at ``xi``."""
    x0 = np.asarray(x0, dtype=float)
    xi = np.asarray(xi, dtype=float)
    n = xi.size
    E = np.eye(n) * step
    pts = np.concatenate([xi + E, xi - E])
    x, _, ok = exp_map_batch(F, x0, pts, s)
    if not ok.all():
        raise NotDefinedError("exp undefined near the probe")
    return ((x[:n] - x[n:]) / (2 * step)).T


def estimate_injectivity(F: QuadraticField, x0, s: ODESettings = DEFAULT_SETTINGS,
                         r_max: Optional[float] = None, levels: int = 20,
                         cond_max: float = 1e8) -> float:
    """Probe-certified lower estimate of the injectivity radius at ``x0``.

    Sweeps ``r_max, r_max/2, ...`` and returns the first radius at which all
    ``2n`` axis probes have a defined exponential, a Jacobian with condition
    number below ``cond_max`` and a successful round trip through
    ``exp_inverse``. Warns and returns the smallest probed radius otherwise.
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    if r_max is None:
        # stay off the boundary so the Jacobian stencil remains inside the domain
        r_max = 0.999 * F.domain.distance_to_boundary(x0) if F.domain is not None else 1.0
    probes = np.concatenate([np.eye(n), -np.eye(n)])
    r = r_max
    for _ in range(levels):
        if _probe_ok(F, x0, r * probes, s, cond_max):
            return float(r)
        r *= 0.5
    warnings.warn("injectivity probe failed at every scale", RuntimeWarning)
    return float(r * 2)


def _probe_ok(F, x0, xis, s, cond_max) -> bool:
    try:
        pts = np.array([exp_map(F, x0, xi, s) for xi in xis])
        for xi in xis:
            J = exp_jacobian(F, x0, xi, s, step=1e-5 * max(1.0, np.linalg.norm(xi)))
            if np.linalg.cond(J) >= cond_max:
                return False
        if F.is_zero:
            return True
        back, res, conv = newton_shoot(F, x0, pts, pts - x0, s)
        scale = np.max(np.linalg.norm(xis, axis=1))
        return bool(conv.all() and np.max(np.abs(back - xis)) <= 1e-6 * max(1.0, scale))
    except (NotDefinedError, ValueError):
        return False


@dataclass(frozen=True)
class NormalMaps:
    """Direction, distance and arrival velocity of the curve from x0 to x."""

    phi: np.ndarray
    dist: float
    chi: np.ndarray


def normal_maps(F: QuadraticField, x0, x, s: ODESettings = DEFAULT_SETTINGS) -> NormalMaps:
    """Unit direction ``exp^{-1}(x)/|exp^{-1}(x)|``, distance and velocity at ``x``.

    The velocity is that of the unit-speed-launched curve through ``x0`` in
    direction ``phi``, taken at time ``dist`` where it passes through ``x``.
    """
    x0 = np.asarray(x0, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.array_equal(x, x0):
        raise ValueError("direction undefined at the base point")
    xi = exp_inverse(F, x0, x, s)
    dist = float(np.linalg.norm(xi))
    phi = xi / dist
    if F.is_zero:
        return NormalMaps(phi, dist, phi.copy())
    res = flow(F, x0[None], phi[None], dist, s)
    if not res.alive[0]:
        raise NotDefinedError("curve leaves the domain")
    return NormalMaps(phi, dist, res.v[0])


@dataclass
class BVPResult:
    """Unit-initial-speed curve from a to b with its end velocities."""

    trajectory: Trajectory
    exit_velocity: np.ndarray
    entry_velocity: np.ndarray
    duration: float


def bvp_geodesic(F: QuadraticField, a, b, s: ODESettings = DEFAULT_SETTINGS) -> BVPResult:
    """Solve ``g'' = F(g, g')``, ``g(0) = a``, ``g(T) = b``, ``|g'(0)| = 1``.

    By 2-homogeneity of F the curve with velocity ``w`` reaches at time one
    what the unit-speed curve in direction ``w/|w|`` reaches at time ``|w|``,
    so shooting reduces to inverting ``exp_a``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.array_equal(a, b):
        raise ValueError("endpoints coincide")
    try:
        w = exp_inverse(F, a, b, s)
    except (InversionError, NotDefinedError) as exc:
        raise BVPError(str(exc)) from exc
    T = float(np.linalg.norm(w))
    d = w / T
    traj = integrate(F, a, d, (0.0, T), s)
    if traj.truncated:
        raise BVPError("boundary curve leaves the domain")
    _, v_end = traj.dense_eval(T)
    if F.is_zero:
        v_end = d.copy()
    return BVPResult(traj, d, v_end, T)
