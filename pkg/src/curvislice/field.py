"""Second-order fields F(x, v) that are quadratic in the velocity v.

A field is stored as a coefficient tensor ``G(x)`` of shape ``(n, n, n)`` with
``F_l(x, v) = sum_ij G[l, i, j](x) v_i v_j`` and ``G`` symmetric in ``(i, j)``.
Coefficient callbacks are vectorized: they take points of shape ``(..., n)``
and return tensors of shape ``(..., n, n, n)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class OutOfDomainError(ValueError):
    """A point lies outside the declared domain box of a field."""


class MetricDegenerateError(ValueError):
    """The metric is not symmetric positive definite at a queried point."""


@dataclass(frozen=True)
class Box:
    """Closed axis-aligned box ``[lo, hi]``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError("box needs matching bounds with hi > lo")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo - tol) & (x <= self.hi + tol), axis=-1)

    def distance_to_boundary(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(np.min(np.minimum(x - self.lo, self.hi - x)))

    def shifted_scaled(self, x0, r: float) -> "Box":
        """Image of the box under ``x -> (x - x0) / r``."""
        x0 = np.asarray(x0, dtype=float)
        return Box((self.lo - x0) / r, (self.hi - x0) / r)


def _symmetrize(G: np.ndarray) -> np.ndarray:
    return 0.5 * (G + np.swapaxes(G, -1, -2))


@dataclass(frozen=True)
class QuadraticField:
    """Field F(x, v) quadratic in v, backed by a coefficient tensor.

    Parameters
    ----------
    dim : int
        Ambient dimension n.
    coeff : callable
        Vectorized map ``x (..., n) -> G (..., n, n, n)``.
    domain : Box, optional
        Declared domain; queries outside it raise ``OutOfDomainError``.
    smoothness_hint : str
        Informational differentiability class.
    is_zero : bool
        Marks the identically vanishing field, enabling exact straight-line
        shortcuts elsewhere in the package.
    """

    dim: int
    coeff: Callable[[np.ndarray], np.ndarray]
    domain: Optional[Box] = None
    smoothness_hint: str = "C-infinity"
    is_zero: bool = False
    name: str = "field"

    def check_domain(self, x) -> None:
        if self.domain is not None and not np.all(self.domain.contains(x)):
            raise OutOfDomainError(f"point outside the domain of {self.name}")

    def in_domain(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.domain is None:
            return np.ones(x.shape[:-1], dtype=bool)
        return self.domain.contains(x)

    def G(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        self.check_domain(x)
        return self.coeff(x)

    def __call__(self, x, v) -> np.ndarray:
        return eval_field(self, x, v)

    def eval_unchecked(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Batch evaluation without the domain check (integrator hot path)."""
        if self.is_zero:
            return np.zeros_like(v)
        return np.einsum("...lij,...i,...j->...l", self.coeff(x), v, v)


def eval_field(F: QuadraticField, x, v) -> np.ndarray:
    """Evaluate ``F(x, v)``; supports broadcasting over leading axes."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != F.dim or x.shape[-1] != F.dim:
        raise ValueError("dimension mismatch")
    F.check_domain(x)
    return F.eval_unchecked(x, v)


def fq_contract(F: QuadraticField, x, v1, v2, v3) -> float:
    """Trilinear contraction ``(v3 / 2) . (F(x, v1 + v2) - F(x, v1) - F(x, v2))``."""
    v1, v2, v3 = (np.asarray(v, dtype=float) for v in (v1, v2, v3))
    polar = eval_field(F, x, v1 + v2) - eval_field(F, x, v1) - eval_field(F, x, v2)
    return float(0.5 * np.dot(v3, polar))


def zero_field(dim: int, domain: Optional[Box] = None) -> QuadraticField:
    def coeff(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (dim, dim, dim))

    return QuadraticField(dim, coeff, domain, is_zero=True, name="zero")


def tensor_field(G_func: Callable, dim: int, domain: Optional[Box] = None,
                 vectorized: bool = True, name: str = "tensor") -> QuadraticField:
    """Wrap a user coefficient callback, enforcing symmetry in the last two axes."""

    if vectorized:
        def coeff(x):
            return _symmetrize(np.asarray(G_func(x), dtype=float))
    else:
        def coeff(x):
            x = np.asarray(x, dtype=float)
            flat = x.reshape(-1, dim)
            out = np.array([G_func(p) for p in flat], dtype=float)
            return _symmetrize(out.reshape(x.shape[:-1] + (dim, dim, dim)))

    return QuadraticField(dim, coeff, domain, name=name)


def rescale_field(F: QuadraticField, r: float, x0) -> QuadraticField:
    """Return the field ``(z, v) -> r F(x0 + r z, v)``."""
    if r <= 0:
        raise ValueError("r must be positive")
    x0 = np.asarray(x0, dtype=float)
    domain = None if F.domain is None else F.domain.shifted_scaled(x0, r)

    def coeff(z):
        return r * F.coeff(x0 + r * np.asarray(z, dtype=float))

    return QuadraticField(F.dim, coeff, domain, F.smoothness_hint, F.is_zero,
                          name=f"{F.name}-rescaled")


# ---------------------------------------------------------------- metrics

@dataclass(frozen=True)
class MetricChart:
    """Riemannian metric in chart coordinates.

    Parameters
    ----------
    dim : int
    g : callable
        Vectorized ``x (..., n) -> (..., n, n)`` symmetric positive definite.
    dg : callable, optional
        Vectorized derivative ``x -> D (..., n, n, n)`` with
        ``D[m, i, j] = d g_ij / d x_m``. Required for analytic mode.
    gamma_mode : {"analytic", "finite-difference"}
    h_gamma : float, optional
        Central-difference step; defaults to ``1e-5 * domain diameter``.
    gamma : callable, optional
        Closed-form Christoffel symbols ``x -> Gamma (..., n, n, n)``; used by
        ``christoffel_field`` in analytic mode as a fast path.
    """

    dim: int
    g: Callable[[np.ndarray], np.ndarray]
    dg: Optional[Callable[[np.ndarray], np.ndarray]] = None
    gamma_mode: str = "analytic"
    h_gamma: Optional[float] = None
    domain: Optional[Box] = None
    name: str = "metric"
    gamma: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def step(self) -> float:
        if self.h_gamma is not None:
            return self.h_gamma
        diam = self.domain.diameter if self.domain is not None else 1.0
        return 1e-5 * diam

    def metric_derivative(self, x: np.ndarray) -> np.ndarray:
        if self.gamma_mode == "analytic":
            if self.dg is None:
                raise ValueError("analytic mode needs the metric derivative dg")
            return np.asarray(self.dg(x), dtype=float)
        if self.gamma_mode != "finite-difference":
            raise ValueError(f"unknown gamma_mode {self.gamma_mode!r}")
        h = self.step()
        parts = []
        for m in range(self.dim):
            e = np.zeros(self.dim)
            e[m] = h
            parts.append((self.g(x + e) - self.g(x - e)) / (2 * h))
        return np.stack(parts, axis=-3)

    def with_mode(self, mode: str, h_gamma: Optional[float] = None) -> "MetricChart":
        return MetricChart(self.dim, self.g, self.dg, mode, h_gamma, self.domain, self.name,
                           self.gamma)


def _check_spd(g: np.ndarray) -> None:
    sym_err = np.max(np.abs(g - np.swapaxes(g, -1, -2)), initial=0.0)
    if sym_err > 1e-12 * max(1.0, float(np.max(np.abs(g)))):
        raise MetricDegenerateError("metric is not symmetric")
    try:
        np.linalg.cholesky(g)
    except np.linalg.LinAlgError:
        raise MetricDegenerateError("metric is not positive definite") from None


def christoffel_symbols(chart: MetricChart, x) -> np.ndarray:
    """Christoffel symbols ``Gamma[l, i, j]`` of the chart metric at ``x``."""
    x = np.asarray(x, dtype=float)
    g = np.asarray(chart.g(x), dtype=float)
    _check_spd(g)
    D = chart.metric_derivative(x)
    ginv = np.linalg.inv(g)
    # first kind: [ij, m] = 1/2 (d_i g_mj + d_j g_mi - d_m g_ij)
    first = 0.5 * (np.einsum("...imj->...ijm", D) + np.einsum("...jmi->...ijm", D)
                   - np.einsum("...mij->...ijm", D))
    return np.einsum("...lm,...ijm->...lij", ginv, first)


def christoffel_field(chart: MetricChart) -> QuadraticField:
    """Geodesic field ``F_l(x, v) = -sum_ij Gamma^l_ij(x) v_i v_j``."""

    if chart.gamma is not None and chart.gamma_mode == "analytic":
        def coeff(x):
            return -_symmetrize(np.asarray(chart.gamma(np.asarray(x, dtype=float)), dtype=float))
    else:
        def coeff(x):
            return -_symmetrize(christoffel_symbols(chart, x))

    return QuadraticField(chart.dim, coeff, chart.domain, name=f"christoffel({chart.name})")


def conformal_chart(dim: int, f: Callable, grad_f: Callable, domain: Optional[Box],
                    name: str) -> MetricChart:
    """Metric ``exp(2 f(x)) I`` with analytic derivative and symbols.

    The symbols are ``Gamma^l_ij = d_il f_j + d_jl f_i - d_ij f_l``.
    """

    def g(x):
        x = np.asarray(x, dtype=float)
        s = np.exp(2 * f(x))
        return s[..., None, None] * np.eye(dim)

    def dg(x):
        x = np.asarray(x, dtype=float)
        s = np.exp(2 * f(x))
        gf = grad_f(x)
        return (2 * s)[..., None, None, None] * gf[..., :, None, None] * np.eye(dim)

    def gamma(x):
        gf = grad_f(np.asarray(x, dtype=float))
        I = np.eye(dim)
        return (np.einsum("li,...j->...lij", I, gf) + np.einsum("lj,...i->...lij", I, gf)
                - np.einsum("ij,...l->...lij", I, gf))

    return MetricChart(dim, g, dg, "analytic", None, domain, name, gamma)


def hyperbolic_chart(domain: Optional[Box] = None) -> MetricChart:
    """Upper half-plane metric ``I / x_2^2`` restricted to a box above the axis."""
    if domain is None:
        domain = Box([-2.0, 0.1], [2.0, 4.0])
    if domain.lo[1] <= 0:
        raise ValueError("hyperbolic chart box must lie in x_2 > 0")

    def f(x):
        return -np.log(x[..., 1])

    def grad_f(x):
        out = np.zeros_like(x)
        out[..., 1] = -1.0 / x[..., 1]
        return out

    return conformal_chart(2, f, grad_f, domain, "hyperbolic-halfplane")


def halfspace_chart(dim: int, domain: Optional[Box] = None) -> MetricChart:
    """Upper half-space metric ``I / x_n^2`` in any dimension."""
    if domain is None:
        domain = Box([-2.0] * (dim - 1) + [0.1], [2.0] * (dim - 1) + [4.0])
    if domain.lo[-1] <= 0:
        raise ValueError("half-space box must lie in x_n > 0")

    def f(x):
        return -np.log(x[..., -1])

    def grad_f(x):
        out = np.zeros_like(x)
        out[..., -1] = -1.0 / x[..., -1]
        return out

    return conformal_chart(dim, f, grad_f, domain, f"hyperbolic-halfspace-{dim}")


def sphere_chart(domain: Optional[Box] = None) -> MetricChart:
    """Unit sphere in stereographic coordinates, metric ``4 I / (1 + |x|^2)^2``."""
    if domain is None:
        domain = Box([-2.0, -2.0], [2.0, 2.0])

    def f(x):
        return np.log(2.0) - np.log1p(np.sum(x * x, axis=-1))

    def grad_f(x):
        return -2.0 * x / (1.0 + np.sum(x * x, axis=-1))[..., None]

    return conformal_chart(2, f, grad_f, domain, "sphere-chart")


def euclidean_chart(dim: int, domain: Optional[Box] = None) -> MetricChart:
    def g(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(dim), x.shape[:-1] + (dim, dim)).copy()

    def dg(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (dim, dim, dim))

    return MetricChart(dim, g, dg, "analytic", None, domain, "euclidean")


BUILTIN_CHARTS = {
    "hyperbolic-halfplane": hyperbolic_chart,
    "sphere-chart": sphere_chart,
}


# ----------------------------------------------------------- shallow shell

def hessian_fd(theta: Callable, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian of a planar scalar function, vectorized."""
    x = np.asarray(x, dtype=float)
    H = np.zeros(x.shape[:-1] + (2, 2))
    e = np.eye(2) * h
    for a in range(2):
        for b in range(a, 2):
            val = (theta(x + e[a] + e[b]) - theta(x + e[a] - e[b])
                   - theta(x - e[a] + e[b]) + theta(x - e[a] - e[b])) / (4 * h * h)
            H[..., a, b] = val
            H[..., b, a] = val
    return H


def shallow_shell_field(theta: Optional[Callable] = None,
                        hessian: Optional[Callable] = None,
                        domain: Optional[Box] = None) -> QuadraticField:
    """Shell field with ``F_1 = F_2 = 0`` and ``F_3(x, z) = -Hess(theta)(x') z . z``.

    The planar Hessian is embedded into the upper-left 2x2 block of the third
    coefficient slice; entries involving the transverse coordinate vanish.
    """
    if hessian is None:
        if theta is None:
            raise ValueError("need theta or its Hessian")

        def hessian(xp):
            return hessian_fd(theta, xp)

    def coeff(x):
        x = np.asarray(x, dtype=float)
        G = np.zeros(x.shape[:-1] + (3, 3, 3))
        G[..., 2, :2, :2] = -np.asarray(hessian(x[..., :2]), dtype=float)
        return G

    return QuadraticField(3, coeff, domain, name="shallow-shell")


@dataclass(frozen=True)
class QuadraticSurface:
    """Mid-surface profile ``theta(x') = 1/2 x'.A x' + b.x'`` with exact derivatives."""

    A: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    b: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        object.__setattr__(self, "A", 0.5 * (A + A.T))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float))

    def __call__(self, xp):
        xp = np.asarray(xp, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", xp, self.A, xp) + xp @ self.b

    def gradient(self, xp):
        return np.asarray(xp, dtype=float) @ self.A + self.b

    def hessian(self, xp):
        xp = np.asarray(xp, dtype=float)
        return np.broadcast_to(self.A, xp.shape[:-1] + (2, 2)).copy()


# ------------------------------------------------------------ JSON loading

def _box_from(doc, dim: int) -> Optional[Box]:
    if doc is None:
        return None
    return Box(np.asarray(doc["lo"], dtype=float), np.asarray(doc["hi"], dtype=float))


def field_from_config(doc: dict):
    """Build ``(field, chart)`` from a field-definition document.

    ``chart`` is the metric chart for the christoffel kind and None otherwise.
    """
    dim = int(doc["dim"])
    kind = doc.get("kind", "zero")
    domain = _box_from(doc.get("domain"), dim)
    if kind == "zero":
        return zero_field(dim, domain), None
    if kind == "christoffel":
        metric = doc.get("metric", "hyperbolic-halfplane")
        if isinstance(metric, str):
            if metric == "euclidean":
                chart = euclidean_chart(dim, domain)
            elif metric in BUILTIN_CHARTS:
                chart = BUILTIN_CHARTS[metric](domain)
            else:
                raise ValueError(f"unknown builtin metric {metric!r}")
        else:
            chart = _grid_metric(metric, dim)
        mode = doc.get("gamma_mode")
        if mode is not None:
            chart = chart.with_mode(mode, doc.get("h_gamma"))
        return christoffel_field(chart), chart
    if kind == "shell":
        surf = QuadraticSurface(doc.get("A", np.zeros((2, 2))), doc.get("b", np.zeros(2)))
        return shallow_shell_field(surf, surf.hessian, domain), None
    if kind == "tensor":
        builtin = doc.get("builtin")
        if builtin is not None:
            if builtin not in BUILTIN_CHARTS:
                raise ValueError(f"unknown builtin field {builtin!r}")
            chart = BUILTIN_CHARTS[builtin](domain)
            return christoffel_field(chart), chart
        return _grid_tensor(doc["grid"], dim), None
    raise ValueError(f"unknown field kind {kind!r}")


def _grid_tensor(doc: dict, dim: int) -> QuadraticField:
    from .gridfield import GridField

    gf = GridField.from_dict(doc)
    if gf.components != dim ** 3:
        raise ValueError("tensor grid needs n^3 components")

    def coeff(x):
        x = np.asarray(x, dtype=float)
        vals = gf.interpolate(x.reshape(-1, dim))
        return _symmetrize(vals.reshape(x.shape[:-1] + (dim, dim, dim)))

    return QuadraticField(dim, coeff, gf.box, smoothness_hint="piecewise multilinear",
                          name="tensor-grid")


def _grid_metric(doc: dict, dim: int) -> MetricChart:
    from .gridfield import GridField

    gf = GridField.from_dict(doc)
    if gf.components != dim * dim:
        raise ValueError("metric grid needs n^2 components")

    def g(x):
        x = np.asarray(x, dtype=float)
        vals = gf.interpolate(x.reshape(-1, dim))
        out = vals.reshape(x.shape[:-1] + (dim, dim))
        return 0.5 * (out + np.swapaxes(out, -1, -2))

    return MetricChart(dim, g, None, "finite-difference", None, gf.box, "metric-grid")
