"""One-dimensional variation analysis of slices.

Jump detection with two-sided median windows, the slice measure that counts
large jumps as unit atoms, directional and integral-geometric jump measures,
the jump-slicing verification against declared surfaces and the rigid edge
seminorm on geodesic simplices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .field import Box, QuadraticField, rescale_field
from .geodesics import DEFAULT_SETTINGS, BVPError, ODESettings, bvp_geodesic, flow
from .gridfield import GridField, Slice1D, extract_slices, slice_times
from .projections import (CurvilinearProjection, ProjectionFamily, build_parametrization,
                          orthonormal_complement)
from .parallel import parallel_map


class UndersampledError(ValueError):
    """A slice component has fewer samples than the detector windows need."""


class SkeletonError(RuntimeError):
    """A geodesic edge of the simplex skeleton could not be computed."""


@dataclass
class JumpRecord:
    """Detected jump of a sampled slice.

    ``left_value``/``right_value`` are one-sided medians; ``signed`` is their
    difference. ``window`` is the sample range ``[i, j]`` between the middle
    samples of the two trace windows; its increments are attributed to the
    jump. ``left_idx``/``right_idx`` are the samples used for the traces.
    """

    t_jump: float
    left_value: float
    right_value: float
    amplitude: float
    signed: float
    window: Tuple[int, int]
    left_idx: np.ndarray
    right_idx: np.ndarray


@dataclass
class SliceMeasure:
    """Discrete representation of the slice measure.

    The absolutely continuous part (together with jumps not larger than the
    threshold) is stored as weights ``ac_w`` at parameters ``ac_t``; jumps
    above the threshold become unit atoms at ``atoms``.
    """

    ac_t: np.ndarray
    ac_w: np.ndarray
    atoms: np.ndarray
    j1_convention_threshold: float = 1.0

    @property
    def ac_variation_below(self) -> float:
        return float(self.ac_w.sum())

    @property
    def total(self) -> float:
        return self.ac_variation_below + float(self.atoms.size)

    def restricted(self, keep_ac: np.ndarray, keep_atoms: np.ndarray) -> float:
        return float(self.ac_w[keep_ac].sum()) + float(np.count_nonzero(keep_atoms))


@dataclass
class SliceAnalysis:
    jumps: List[JumpRecord]
    measure: SliceMeasure
    variation: float
    thresholds: List[float]
    diffuse: float = 0.0

    def decomposition_residual(self) -> float:
        """``|variation - (diffuse part + sum of jump amplitudes)|``."""
        return abs(self.variation - self.diffuse - sum(j.amplitude for j in self.jumps))


def _running_median(x: np.ndarray, lo_off: int, hi_off: int) -> np.ndarray:
    """Median of ``x[k + lo_off .. k + hi_off]`` for every ``k``, windows truncated at the ends.

    ``x`` must be finite; windows are NaN-padded and sorted so that the
    truncated ones take the median of their valid entries only.
    """
    L = x.size
    width = hi_off - lo_off + 1
    pad = np.full(width, np.nan)
    xp = np.concatenate([pad, x, pad])
    W = sliding_window_view(xp, width)[lo_off + width: lo_off + width + L]
    S = np.sort(W, axis=1)
    m = np.count_nonzero(np.isfinite(W), axis=1)
    lo = np.clip((m - 1) // 2, 0, width - 1)
    hi = np.clip(m // 2, 0, width - 1)
    rows = np.arange(L)
    out = 0.5 * (S[rows, lo] + S[rows, hi])
    out[m == 0] = np.nan
    return out


def _median_windows(v: np.ndarray, w: int):
    """Left medians over ``v[k-w+1..k]`` and right medians over ``v[k+1..k+w]``."""
    left = _running_median(v, -(w - 1), 0)[:-1]
    right = _running_median(v, 1, w)[:-1]
    return left, right


def _detection_threshold(v: np.ndarray, h_t: float, h_space: float, w: int) -> np.ndarray:
    """Per-increment threshold: noise level plus interpolation slope term."""
    d = np.diff(v)
    dd = np.diff(d)
    mad = 1.4826 * float(np.median(np.abs(dd - np.median(dd)))) if dd.size else 0.0
    slope = np.abs(d) / h_t
    half = 9 * w
    loc = _running_median(slope, -half, half)
    scale = max(1.0, float(np.max(np.abs(v))))
    return 10.0 * (mad + max(h_space, h_t) * loc) + 1e-9 * scale


def _analyze_component(t, v, w, thr_fixed, h_space, h_t):
    L = v.size
    d = np.diff(v)
    left, right = _median_windows(v, w)
    D = right - left
    thr = (np.full(L - 1, thr_fixed) if thr_fixed is not None
           else _detection_threshold(v, h_t, h_space, w))
    hit = np.abs(D) > thr
    jumps = []
    k = 0
    while k < L - 1:
        if not hit[k]:
            k += 1
            continue
        g0 = k
        sgn = np.sign(D[k])
        while k + 1 < L - 1 and hit[k + 1] and np.sign(D[k + 1]) == sgn:
            k += 1
        g1 = k
        thr_g = float(np.max(thr[g0:g1 + 1]))
        k = g1 + 1
        li = np.arange(max(0, g0 - w + 1), g0 + 1)
        ri = np.arange(g1 + 1, min(L, g1 + 1 + w))
        Lv = float(np.median(v[li]))
        Rv = float(np.median(v[ri]))
        A = Rv - Lv
        if abs(A) <= thr_g:
            continue
        mid = 0.5 * (Lv + Rv)
        tj = None
        for i in range(g0, g1 + 1):
            a, b = v[i] - mid, v[i + 1] - mid
            if a == 0.0:
                tj = t[i]
                break
            if a * b < 0 or b == 0.0:
                tj = t[i] + (t[i + 1] - t[i]) * a / (a - b)
                break
        if tj is None:
            i = g0 + int(np.argmax(np.abs(d[g0:g1 + 1])))
            tj = 0.5 * (t[i] + t[i + 1])
        # increments between the middle samples of the two trace windows
        a = max(int(li[0]), g0 - (w - 1) // 2)
        b = min(int(ri[-1]), g1 + 1 + (w - 1) // 2)
        jumps.append(JumpRecord(float(tj), Lv, Rv, abs(A), A, (a, b), li, ri))
    return jumps, d, thr


def analyze_slice(s: Slice1D, jump_threshold: Optional[float] = None, window: int = 3,
                  j1_threshold: float = 1.0, strict: bool = True) -> SliceAnalysis:
    """Jumps, measure and pointwise variation of a sampled slice.

    Parameters
    ----------
    jump_threshold : float, optional
        Fixed detection threshold. By default it is ten times the robust
        noise level of second differences plus the interpolation term
        ``max(h, h_t)`` times the local median slope.
    window : int
        Median window length ``w``.
    j1_threshold : float
        Jumps larger than this count as unit atoms; smaller ones add their
        amplitude to the diffuse part.
    strict : bool
        Raise ``UndersampledError`` for components shorter than ``2w + 2``
        samples; otherwise such components contribute only their diffuse
        variation.
    """
    w = int(window)
    jumps: List[JumpRecord] = []
    ac_t, ac_w, atoms, thrs = [], [], [], []
    variation = diffuse = 0.0
    for i0, i1 in s.components():
        t = s.t[i0:i1]
        v = s.values[i0:i1]
        if v.size < 2 * w + 2:
            if strict:
                raise UndersampledError("slice component too short for the detector windows")
            if v.size >= 2:
                d = np.abs(np.diff(v))
                variation += float(d.sum())
                diffuse += float(d.sum())
                ac_t.append(0.5 * (t[1:] + t[:-1]))
                ac_w.append(d)
            continue
        comp_jumps, d, thr = _analyze_component(t, v, w, jump_threshold, s.h_space, s.h_t)
        thrs.append(float(np.max(thr)))
        ad = np.abs(d)
        variation += float(ad.sum())
        keep = np.ones(d.size, dtype=bool)
        for jr in comp_jumps:
            a, b = jr.window
            keep[a:b] = False
            excess = max(0.0, float(ad[a:b].sum()) - jr.amplitude)
            diffuse += excess
            ac_t.append([jr.t_jump])
            ac_w.append([excess])
            if jr.amplitude > j1_threshold:
                atoms.append(jr.t_jump)
            else:
                ac_t.append([jr.t_jump])
                ac_w.append([jr.amplitude])
            jr.window = (i0 + a, i0 + b)
            jr.left_idx = jr.left_idx + i0
            jr.right_idx = jr.right_idx + i0
        ac_t.append(0.5 * (t[1:] + t[:-1])[keep])
        ac_w.append(ad[keep])
        diffuse += float(ad[keep].sum())
        jumps.extend(comp_jumps)
    meas = SliceMeasure(np.concatenate([np.asarray(a, dtype=float) for a in ac_t]) if ac_t else np.zeros(0),
                        np.concatenate([np.asarray(a, dtype=float) for a in ac_w]) if ac_w else np.zeros(0),
                        np.array(atoms, dtype=float), j1_threshold)
    return SliceAnalysis(jumps, meas, variation, thrs, diffuse)


def slice_from_values(t, values, h_space: float = 0.0, xi=None) -> Slice1D:
    """Wrap raw samples as a slice (all samples valid where finite)."""
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    mask = np.isfinite(v)
    xi = np.array([1.0]) if xi is None else np.asarray(xi, dtype=float)
    n = xi.size
    h_t = float(np.min(np.diff(t)))
    return Slice1D(xi, np.zeros(n), t, v, mask, np.full((t.size, n), np.nan),
                   np.full((t.size, n), np.nan), h_t, h_space)


def truncation(a: float = 0.0) -> Callable:
    """Admissible truncation ``s -> arctan(pi (s - a)) / pi``."""
    return lambda s: np.arctan(np.pi * (np.asarray(s) - a)) / np.pi


def truncated_variation(s: Slice1D, tau: Optional[Callable] = None) -> float:
    """Pointwise variation of ``tau(slice)`` summed over domain components."""
    tau = truncation(0.0) if tau is None else tau
    tot = 0.0
    for i0, i1 in s.components():
        tv = tau(s.values[i0:i1])
        tot += float(np.abs(np.diff(tv)).sum())
    return tot


# --------------------------------------------------------- slice quadrature

def base_quadrature(proj: CurvilinearProjection, h_y: float):
    """Midpoint nodes ``y`` (ambient vectors) and weight on the base disc."""
    par = proj.param
    m1 = par.dim - 1
    k = int(np.ceil(par.rho / h_y))
    ax = (np.arange(-k, k) + 0.5) * h_y
    if m1 == 0:
        C = np.zeros((1, 0))
    else:
        C = np.stack(np.meshgrid(*([ax] * m1), indexing="ij"), axis=-1).reshape(-1, m1)
        C = C[np.linalg.norm(C, axis=1) <= par.rho]
    return C @ par.basis.T, h_y ** m1


def _points_at(s: Slice1D, tq: np.ndarray) -> np.ndarray:
    """Curve points at parameters ``tq`` by linear interpolation of the samples."""
    n = s.points.shape[1]
    return np.column_stack([np.interp(tq, s.t, s.points[:, i]) for i in range(n)])


def _in_region(region, X: np.ndarray) -> np.ndarray:
    if region is None:
        return np.ones(X.shape[0], dtype=bool)
    if isinstance(region, Box):
        return region.contains(X)
    return np.asarray(region(X), dtype=bool)


@dataclass
class DirectionalSums:
    """Per-direction quadrature of slice quantities restricted to a region."""

    mu: float
    eta: float
    n_slices: int
    n_jumps: int


def _direction_sums(u: GridField, proj: CurvilinearProjection, region, h_y: float,
                    h_t: float, window: int, jump_threshold, j1_threshold: float,
                    use_analytic: bool, batch: int = 256, y_range=None,
                    t_range=None) -> DirectionalSums:
    Y, wy = base_quadrature(proj, h_y)
    if y_range is not None:
        c = proj.param.coords_from_y(Y)
        lo, hi = (np.atleast_1d(np.asarray(a, dtype=float)) for a in y_range)
        Y = Y[np.all((c >= lo) & (c <= hi), axis=1)]
    t_samples = None
    if t_range is not None:
        t_all = slice_times(proj.param.tau, h_t)
        t_samples = t_all[(t_all >= t_range[0]) & (t_all <= t_range[1])]
    mu = eta = 0.0
    nj = 0
    for b0 in range(0, Y.shape[0], batch):
        slices = extract_slices(u, proj.param, Y[b0:b0 + batch], h_t, t_samples=t_samples,
                                use_analytic=use_analytic)
        for s in slices:
            if not s.mask.any():
                continue
            an = analyze_slice(s, jump_threshold, window, j1_threshold, strict=False)
            m = an.measure
            keep_ac = _in_region(region, _points_at(s, m.ac_t)) if m.ac_t.size else np.zeros(0, bool)
            keep_at = _in_region(region, _points_at(s, m.atoms)) if m.atoms.size else np.zeros(0, bool)
            mu += wy * m.restricted(keep_ac, keep_at)
            if an.jumps:
                tj = np.array([j.t_jump for j in an.jumps])
                amp = np.array([j.amplitude for j in an.jumps])
                inside = _in_region(region, _points_at(s, tj))
                eta += wy * float(np.minimum(amp[inside], 1.0).sum())
                nj += int(inside.sum())
    return DirectionalSums(mu, eta, Y.shape[0], nj)


def mu_xi_u(u: GridField, proj: CurvilinearProjection, h_y: Optional[float] = None,
            region=None, h_t: Optional[float] = None, window: int = 3,
            jump_threshold: Optional[float] = None, j1_threshold: float = 1.0,
            use_analytic: bool = True, y_range=None, t_range=None) -> float:
    """Midpoint quadrature over base points of the slice measures of ``region``.

    ``region`` is a Box, a predicate on points ``(k, n)`` or None (whole
    field box). An empty region (predicate always False) gives 0.
    ``y_range`` (bounds on hyperplane coordinates) and ``t_range`` restrict
    the quadrature to curves and parameters known to contain the region.
    """
    h_y = u.h / 2 if h_y is None else h_y
    h_t = u.h / 2 if h_t is None else h_t
    return _direction_sums(u, proj, region, h_y, h_t, window, jump_threshold,
                           j1_threshold, use_analytic, y_range=y_range, t_range=t_range).mu


def eta_xi(u: GridField, proj: CurvilinearProjection, region=None, h_y: Optional[float] = None,
           h_t: Optional[float] = None, window: int = 3, jump_threshold: Optional[float] = None,
           use_analytic: bool = True) -> float:
    """Quadrature over base points of ``sum min(|jump|, 1)`` over slice jumps in ``region``."""
    h_y = u.h / 2 if h_y is None else h_y
    h_t = u.h / 2 if h_t is None else h_t
    return _direction_sums(u, proj, region, h_y, h_t, window, jump_threshold, 1.0,
                           use_analytic).eta


def sphere_area(n: int) -> float:
    from math import gamma, pi
    return 2 * pi ** (n / 2) / gamma(n / 2)


def integral_geometric(u: GridField, family: ProjectionFamily, region=None,
                       h_y: Optional[float] = None, h_t: Optional[float] = None,
                       window: int = 3, use_analytic: bool = True,
                       threads: Optional[int] = None, return_terms: bool = False):
    """Uniform-weight sphere quadrature of the directional jump measures.

    Each direction carries weight ``|S^{n-1}| / N``.
    """
    h_y = u.h / 2 if h_y is None else h_y
    h_t = u.h / 2 if h_t is None else h_t
    terms = parallel_map(lambda p: _direction_sums(u, p, region, h_y, h_t, window, None, 1.0,
                                                   use_analytic),
                         family.projections, threads)
    wt = sphere_area(family.dim) / len(family)
    total = wt * sum(t.eta for t in terms)
    if return_terms:
        return total, terms
    return total


# ------------------------------------------------------- declared surfaces

@dataclass
class Plane:
    """Hyperplane ``{x : x . normal = offset}`` with unit normal."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=float)
        nn = np.linalg.norm(self.normal)
        self.normal = self.normal / nn
        self.offset = float(self.offset) / nn

    def value(self, X):
        return np.asarray(X) @ self.normal - self.offset

    def gradient(self, X):
        return np.broadcast_to(self.normal, np.shape(X)).copy()

    def distance(self, X):
        return np.abs(self.value(X))


@dataclass
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)

    def value(self, X):
        return np.linalg.norm(np.asarray(X) - self.center, axis=-1) - self.radius

    def gradient(self, X):
        d = np.asarray(X) - self.center
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def distance(self, X):
        return np.abs(self.value(X))


@dataclass
class LevelSet:
    """Zero set of ``fn`` with gradient ``grad``; distance is first order ``|f|/|grad f|``."""

    fn: Callable
    grad: Callable

    def value(self, X):
        return np.asarray(self.fn(np.atleast_2d(X)))

    def gradient(self, X):
        return np.asarray(self.grad(np.atleast_2d(X)))

    def distance(self, X):
        g = np.linalg.norm(self.gradient(X), axis=-1)
        return np.abs(self.value(X)) / g


@dataclass
class JumpField:
    """Piecewise field: ``plus`` where the surface value is positive, ``minus`` elsewhere.

    ``lipschitz`` bounds the Lipschitz constants of both sides.
    """

    surface: object
    plus: Callable
    minus: Callable
    lipschitz: float = 0.0

    def __call__(self, X):
        X = np.atleast_2d(X)
        pos = self.surface.value(X) > 0
        return np.where(pos[:, None], self.plus(X), self.minus(X))

    def grid(self, box: Box, h: float) -> GridField:
        return GridField.from_function(self, box, h)


@dataclass
class SlicingReport:
    precision: float
    recall: float
    max_position_error: float
    max_trace_error: float
    max_trace_ratio: float
    n_slices: int
    n_detected: int
    n_true_positive: int
    n_transversal: int
    n_recalled: int
    n_excluded: int
    details: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "precision", "recall", "max_position_error", "max_trace_error",
            "max_trace_ratio", "n_slices", "n_detected", "n_true_positive",
            "n_transversal", "n_recalled", "n_excluded")}


def _local_states(F, X0, V0, dt, s):
    """Points and velocities at time ``dt`` after the states ``(X0, V0)``."""
    if F.is_zero:
        return X0 + dt[:, None] * V0, V0.copy()
    res = flow(F, X0, dt[:, None] * V0, 1.0, s)
    safe = np.where(dt == 0, 1.0, dt)
    V = res.v / safe[:, None]
    V[dt == 0] = V0[dt == 0]
    X = np.where((dt == 0)[:, None], X0, res.x)
    return X, V


def surface_crossings(param, surface, slices: Sequence[Slice1D], iters: int = 60,
                      tol: float = 1e-13):
    """Exact crossings of the sampled curves with the surface.

    Sign changes of the surface function between consecutive valid samples
    are refined by a batched Illinois iteration on curves restarted from the
    sample states. Returns ``(slice index, t, sample index, point, velocity)``
    tuples.
    """
    S_i, K, T0, H, X0, V0, G0, G1 = [], [], [], [], [], [], [], []
    for si, s in enumerate(slices):
        fin = s.mask
        if not fin.any():
            continue
        g = np.full(s.t.size, np.nan)
        g[fin] = surface.value(s.points[fin])
        ks = np.flatnonzero(fin[:-1] & fin[1:] & ((g[:-1] * g[1:] < 0) | (g[:-1] == 0)))
        for k in ks:
            S_i.append(si)
            K.append(k)
            T0.append(s.t[k])
            H.append(s.t[k + 1] - s.t[k])
            X0.append(s.points[k])
            V0.append(s.velocities[k])
            G0.append(g[k])
            G1.append(g[k + 1])
    if not S_i:
        return []
    X0 = np.array(X0)
    V0 = np.array(V0)
    a = np.zeros(len(S_i))
    b = np.array(H)
    ga = np.array(G0)
    gb = np.array(G1)
    F = param.F
    st = param.settings
    x = np.zeros(len(S_i))
    for _ in range(iters):
        with np.errstate(invalid="ignore", divide="ignore"):
            x = np.where(ga == 0, a, (a * gb - b * ga) / (gb - ga))
        bad = ~np.isfinite(x) | (x <= a) | (x >= b)
        x = np.where(bad & (ga != 0), 0.5 * (a + b), x)
        if np.all((b - a) < tol) or np.all(ga == 0):
            break
        Xm, _ = _local_states(F, X0, V0, x, st)
        gm = surface.value(Xm)
        same = np.sign(gm) == np.sign(ga)
        # Illinois: halve the retained endpoint value on repeated sides
        gb = np.where(same, gb * 0.5, gm)
        b = np.where(same, b, x)
        ga = np.where(same, gm, ga)
        a = np.where(same, x, a)
        exact = gm == 0
        a[exact] = b[exact] = x[exact]
        ga[exact] = 0.0
        if np.all(np.minimum(np.abs(gm), b - a) < tol):
            break
    Xc, Vc = _local_states(F, X0, V0, x, st)
    return [(S_i[i], T0[i] + x[i], K[i], Xc[i], Vc[i]) for i in range(len(S_i))]


def _kth_smallest(vals: np.ndarray, k: int) -> float:
    return float(np.sort(vals)[min(k, vals.size) - 1])


def jump_slicing_check(u: GridField, jf: JumpField, family: ProjectionFamily, n_slices: int = 200,
                       seed: int = 0, h_t: Optional[float] = None, window: int = 3,
                       angle_min_deg: float = 5.0, use_analytic: bool = False,
                       min_amplitude: float = 1e-6) -> SlicingReport:
    """Compare detected slice jumps with exact curve-surface intersections.

    For random (direction, base point) pairs:

    * precision: a detected jump is a true positive when the curve point at
      the detected parameter lies within the interpolation band of the
      surface (distance at most ``sqrt(n) h``, the cell diameter);
    * recall: transversal intersections (angle between velocity and tangent
      plane at least ``angle_min_deg``) with slice amplitude above
      ``min_amplitude`` and full detector windows inside the slice domain
      must be matched by a detection within the along-curve radius
      ``2 sqrt(2) h / (|velocity| sin(angle)) + 2 h_t`` (the one whose
      amplitude is closest to the exact slice amplitude);
    * position error: distance to the surface of the curve point at each
      matched detection;
    * traces: compared as an unordered pair with the exact one-sided values
      ``u^+- . velocity``; each error is divided by a bound made of the
      variation of the exact one-sided slice over the trace samples plus the
      multilinear interpolation error at those samples.
    """
    rng = np.random.default_rng(seed)
    h = u.h
    h_t = h / 2 if h_t is None else h_t
    n = family.dim
    band = np.sqrt(n) * h
    sin_min = np.sin(np.deg2rad(angle_min_deg))
    ks = rng.integers(0, len(family), size=n_slices)
    tp = fp = 0
    n_trans = n_rec = n_excl = 0
    max_pos = max_tr = max_ratio = 0.0
    details = []
    w = window
    half = (w + 1) // 2
    for kd in np.unique(ks):
        proj = family.projections[kd]
        par = proj.param
        cnt = int(np.count_nonzero(ks == kd))
        c = rng.standard_normal((cnt, n - 1))
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        c *= par.rho * rng.uniform(size=(cnt, 1)) ** (1.0 / (n - 1))
        Y = c @ par.basis.T
        slices = extract_slices(u, par, Y, h_t, use_analytic=use_analytic)
        analyses = [analyze_slice(sl, None, w, strict=False) for sl in slices]
        # detected positions, batched
        owners = [(i, j) for i, an in enumerate(analyses) for j in range(len(an.jumps))]
        det_dist = {}
        if owners:
            Yd = np.array([Y[i] for i, _ in owners])
            Td = np.array([analyses[i].jumps[j].t_jump for i, j in owners])
            Xd, _ = par.phi(Yd, Td)
            dd = jf.surface.distance(Xd)
            for o, d in zip(owners, dd):
                det_dist[o] = float(d)
            ok = dd <= band
            tp += int(ok.sum())
            fp += int((~ok).sum())
        for si, tstar, k, x, v in surface_crossings(par, jf.surface, slices):
            s = slices[si]
            an = analyses[si]
            gr = jf.surface.gradient(x[None])[0]
            sin_t = abs(v @ gr) / (np.linalg.norm(v) * np.linalg.norm(gr))
            up = float(jf.plus(x[None])[0] @ v)
            um = float(jf.minus(x[None])[0] @ v)
            amp = abs(up - um)
            comp = next((cc for cc in s.components() if cc[0] <= k < cc[1]), None)
            interior = (comp is not None and k - comp[0] >= w + 1
                        and comp[1] - 1 - (k + 1) >= w + 1)
            if sin_t < sin_min or amp <= min_amplitude or not interior:
                n_excl += 1
                continue
            n_trans += 1
            radius = 2 * np.sqrt(2) * h / (np.linalg.norm(v) * max(sin_t, sin_min)) + 2 * h_t
            det_t = np.array([jr.t_jump for jr in an.jumps])
            cand = np.flatnonzero(np.abs(det_t - tstar) <= radius) if det_t.size else det_t
            # among detections in range, the one whose amplitude best fits
            j = (int(cand[np.argmin([abs(an.jumps[c].amplitude - amp) for c in cand])])
                 if cand.size else -1)
            if j < 0:
                details.append({"missed": True, "direction": int(kd), "y": Y[si].tolist(),
                                "t": float(tstar), "sin_angle": float(sin_t)})
                continue
            n_rec += 1
            max_pos = max(max_pos, det_dist[(si, j)])
            jr = an.jumps[j]
            bounds = []
            for idx in (jr.left_idx, jr.right_idx):
                P = s.points[idx]
                Vs = s.velocities[idx]
                # side of the window chosen by majority of its samples
                use_plus = bool(np.sum(jf.surface.value(P) > 0) * 2 > idx.size)
                fn = jf.plus if use_plus else jf.minus
                ex = np.einsum("ki,ki->k", fn(P), Vs)
                target = up if use_plus else um
                near = jf.surface.distance(P) <= band
                wrong = (jf.surface.value(P) > 0) != use_plus
                interp = (band * jf.lipschitz * np.linalg.norm(Vs, axis=1)
                          + np.where(near | wrong, amp + np.abs(ex - target), 0.0))
                bounds.append(_kth_smallest(np.abs(ex - target) + interp, half))
            e1 = max(abs(jr.left_value - um), abs(jr.right_value - up))
            e2 = max(abs(jr.left_value - up), abs(jr.right_value - um))
            err = min(e1, e2)
            B = max(bounds) + 1e-12 * max(1.0, abs(up) + abs(um))
            max_tr = max(max_tr, err)
            max_ratio = max(max_ratio, err / B)
    n_det = tp + fp
    return SlicingReport(
        precision=tp / n_det if n_det else 1.0,
        recall=n_rec / n_trans if n_trans else 1.0,
        max_position_error=max_pos, max_trace_error=max_tr, max_trace_ratio=max_ratio,
        n_slices=n_slices, n_detected=n_det, n_true_positive=tp, n_transversal=n_trans,
        n_recalled=n_rec, n_excluded=n_excl, details=details)


# ----------------------------------------------------------- rigid seminorm

def simplex_vertices(z, n: int) -> np.ndarray:
    """Vertices ``z + e_i`` for ``i = 0..n`` with ``e_0 = 0``."""
    z = np.asarray(z, dtype=float)
    return np.concatenate([z[None], z + np.eye(n)])


def skeleton_velocities(F: QuadraticField, x, r: float, z, s: ODESettings = DEFAULT_SETTINGS):
    """Unit launch and arrival velocities of every edge geodesic of the rescaled field.

    Returns a dict ``(i, j) -> (launch at vertex i, arrival at vertex j)``.
    """
    n = F.dim
    Fr = rescale_field(F, r, x)
    V = simplex_vertices(z, n)
    out = {}
    for i in range(n + 1):
        for j in range(i + 1, n + 1):
            try:
                res = bvp_geodesic(Fr, V[i], V[j], s)
            except (BVPError, ValueError) as exc:
                raise SkeletonError(f"edge {i}-{j}: {exc}") from exc
            out[(i, j)] = (res.exit_velocity, res.entry_velocity)
    return out


def rigid_seminorm(F: QuadraticField, x, r: float, z, w, s: ODESettings = DEFAULT_SETTINGS,
                   skeleton=None) -> float:
    """Sum over simplex edges of ``|w^j . xi_ji - w^i . xi_ij|``.

    ``w`` has one row of nodal vectors per vertex ``z + e_i``.
    """
    w = np.asarray(w, dtype=float)
    n = F.dim
    if w.shape != (n + 1, n):
        raise ValueError("w must be an (n+1) x n array")
    sk = skeleton_velocities(F, x, r, z, s) if skeleton is None else skeleton
    tot = 0.0
    for (i, j), (xij, xji) in sk.items():
        tot += abs(float(w[j] @ xji) - float(w[i] @ xij))
    return tot


# ------------------------------------------------ lower semicontinuity probe

@dataclass
class LscReport:
    """Measure of a region for a limit direction and for a sequence approaching it."""

    mu_limit: float
    mu_sequence: List[float]
    angles: List[float]
    rel_slack: float

    @property
    def passed(self) -> bool:
        return self.mu_limit <= min(self.mu_sequence) + self.rel_slack * self.mu_limit + 1e-12

    @property
    def passed_liminf(self) -> bool:
        """Weaker reading with the closest direction standing in for the liminf."""
        return self.mu_limit <= self.mu_sequence[-1] + self.rel_slack * self.mu_limit + 1e-12

    def to_dict(self) -> dict:
        return {"mu_limit": self.mu_limit, "mu_sequence": self.mu_sequence,
                "angles": self.angles, "rel_slack": self.rel_slack, "passed": self.passed,
                "passed_liminf": self.passed_liminf}


def lsc_probe(u: GridField, F: QuadraticField, x0, xi, region, radius: float,
              angles=(0.2, 0.1, 0.05, 0.025, 0.0125), h_y: Optional[float] = None,
              rel_slack: float = 0.05, s: ODESettings = DEFAULT_SETTINGS) -> LscReport:
    """Compare the slice measure of ``region`` along ``xi`` with directions tilted
    towards it along a great circle by the given angles."""
    xi = np.asarray(xi, dtype=float)
    xi = xi / np.linalg.norm(xi)
    e = orthonormal_complement(xi)[:, 0]
    h_y = u.h / 2 if h_y is None else h_y

    def mu(d):
        par = build_parametrization(F, x0, d, radius, radius, None, s)
        return mu_xi_u(u, CurvilinearProjection(par), h_y, region)

    seq = [mu(np.cos(a) * xi + np.sin(a) * e) for a in angles]
    return LscReport(mu(xi), seq, [float(a) for a in angles], rel_slack)
