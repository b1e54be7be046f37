"""Vector fields sampled on regular box grids and their one-dimensional slices."""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .field import Box
from .projections import CurvilinearProjection, Parametrization


class SliceRangeError(ValueError):
    """Requested base point lies outside the parametrization's base disc."""


@dataclass
class GridField:
    """Samples of an ``m``-component field on a regular lattice.

    ``values`` has shape ``(*shape, m)`` (row-major, component fastest).
    ``analytic`` optionally bypasses interpolation with an exact callback
    taking points ``(k, n)`` and returning ``(k, m)``. ``mask`` marks valid
    nodes; None means every node is valid.
    """

    origin: np.ndarray
    spacing: np.ndarray
    shape: Tuple[int, ...]
    components: int
    values: np.ndarray
    analytic: Optional[Callable] = None
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        n = self.origin.size
        self.spacing = np.broadcast_to(np.asarray(self.spacing, dtype=float), (n,)).copy()
        self.shape = tuple(int(s) for s in self.shape)
        self.values = np.asarray(self.values, dtype=float).reshape(self.shape + (self.components,))
        if len(self.shape) != n or min(self.shape) < 2:
            raise ValueError("lattice needs at least two nodes per axis")
        if np.any(self.spacing <= 0):
            raise ValueError("spacing must be positive")
        valid = np.ones(self.shape, dtype=bool) if self.mask is None else self.mask
        if not np.all(np.isfinite(self.values[valid])):
            raise ValueError("grid values must be finite on valid nodes")

    @property
    def dim(self) -> int:
        return self.origin.size

    @property
    def box(self) -> Box:
        return Box(self.origin, self.origin + self.spacing * (np.array(self.shape) - 1))

    @property
    def h(self) -> float:
        return float(np.max(self.spacing))

    def nodes(self) -> np.ndarray:
        """Node coordinates, shape ``(*shape, n)``."""
        axes = [self.origin[i] + self.spacing[i] * np.arange(self.shape[i])
                for i in range(self.dim)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    @classmethod
    def from_function(cls, fn: Callable, box: Box, h, keep_analytic: bool = False,
                      components: Optional[int] = None) -> "GridField":
        """Sample ``fn`` (points ``(k, n)`` to ``(k, m)``) on a lattice of spacing ``h``."""
        n = box.dim
        h = np.broadcast_to(np.asarray(h, dtype=float), (n,))
        shape = tuple(int(round(e)) + 1 for e in (box.hi - box.lo) / h)
        spacing = (box.hi - box.lo) / (np.array(shape) - 1)
        gf_nodes = cls(box.lo, spacing, shape, 1, np.zeros(shape)).nodes()
        vals = np.asarray(fn(gf_nodes.reshape(-1, n)), dtype=float)
        m = components if components is not None else (vals.shape[-1] if vals.ndim > 1 else 1)
        return cls(box.lo, spacing, shape, m, vals.reshape(shape + (m,)),
                   analytic=fn if keep_analytic else None)

    def interpolate(self, X) -> np.ndarray:
        """Multilinear interpolation at points ``(k, n)``; NaN outside the box."""
        X = np.array(X, dtype=float, ndmin=2)
        k, n = X.shape
        out = np.full((k, self.components), np.nan)
        inside = self.box.contains(X, tol=1e-12) & np.all(np.isfinite(X), axis=1)
        if not inside.any():
            return out
        s = (X[inside] - self.origin) / self.spacing
        shp = np.array(self.shape)
        i0 = np.clip(np.floor(s).astype(int), 0, shp - 2)
        f = np.clip(s - i0, 0.0, 1.0)
        acc = np.zeros((s.shape[0], self.components))
        flat = self.values.reshape(-1, self.components)
        strides = np.cumprod((list(shp[1:]) + [1])[::-1])[::-1]
        for corner in range(2 ** n):
            bits = np.array([(corner >> (n - 1 - d)) & 1 for d in range(n)])
            w = np.prod(np.where(bits, f, 1.0 - f), axis=1)
            idx = (i0 + bits) @ strides
            acc += w[:, None] * flat[idx]
        out[inside] = acc
        if self.mask is not None:
            # any invalid corner poisons the interpolant
            mflat = self.mask.reshape(-1)
            bad = np.zeros(s.shape[0], dtype=bool)
            for corner in range(2 ** n):
                bits = np.array([(corner >> (n - 1 - d)) & 1 for d in range(n)])
                bad |= ~mflat[(i0 + bits) @ strides]
            sub = out[inside]
            sub[bad] = np.nan
            out[inside] = sub
        return out

    def evaluate(self, X, use_analytic: bool = True) -> np.ndarray:
        """Field values at ``X``: the analytic callback when present, else interpolation."""
        X = np.array(X, dtype=float, ndmin=2)
        if use_analytic and self.analytic is not None:
            out = np.full((X.shape[0], self.components), np.nan)
            inside = self.box.contains(X, tol=1e-12) & np.all(np.isfinite(X), axis=1)
            if inside.any():
                out[inside] = np.asarray(self.analytic(X[inside]), dtype=float).reshape(-1, self.components)
            return out
        return self.interpolate(X)

    # ------------------------------------------------------------- file I/O

    def header(self) -> dict:
        return {"dim": self.dim, "origin": self.origin.tolist(),
                "spacing": self.spacing.tolist(), "shape": list(self.shape),
                "components": self.components}

    def _blob(self) -> bytes:
        return np.ascontiguousarray(self.values, dtype="<f8").tobytes()

    def to_dict(self) -> dict:
        """JSON-ready document with the samples inline as base64."""
        doc = self.header()
        doc["data_base64"] = base64.b64encode(self._blob()).decode("ascii")
        return doc

    @classmethod
    def from_dict(cls, doc: dict, base_dir: str = ".") -> "GridField":
        shape = tuple(doc["shape"])
        m = int(doc.get("components", 1))
        if "data_base64" in doc:
            raw = base64.b64decode(doc["data_base64"])
        elif "data_file" in doc:
            with open(os.path.join(base_dir, doc["data_file"]), "rb") as fh:
                raw = fh.read()
        elif "values" in doc:
            return cls(doc["origin"], doc["spacing"], shape, m,
                       np.asarray(doc["values"], dtype=float))
        else:
            raise ValueError("grid document carries no samples")
        vals = np.frombuffer(raw, dtype="<f8")
        if vals.size != int(np.prod(shape)) * m:
            raise ValueError("sample count does not match shape and components")
        return cls(doc["origin"], doc["spacing"], shape, m, vals.astype(float))

    def save(self, path: str) -> None:
        """Write ``path`` (JSON header) and ``path`` with ``.bin`` appended (samples)."""
        doc = self.header()
        doc["data_file"] = os.path.basename(path) + ".bin"
        with open(path + ".bin", "wb") as fh:
            fh.write(self._blob())
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)

    @classmethod
    def load(cls, path: str) -> "GridField":
        with open(path) as fh:
            doc = json.load(fh)
        return cls.from_dict(doc, os.path.dirname(os.path.abspath(path)))


# ----------------------------------------------------------------- slices

@dataclass
class Slice1D:
    """Samples of ``t -> u(phi(y + t xi)) . phi'(y + t xi)`` on a uniform grid.

    ``mask`` is True where the curve point lies in the field's box; values
    and velocities are NaN elsewhere. ``h_space`` is the lattice spacing of
    the sampled field (0 for exact callbacks).
    """

    xi: np.ndarray
    y: np.ndarray
    t: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    velocities: np.ndarray
    points: np.ndarray
    h_t: float
    h_space: float = 0.0

    def components(self) -> List[Tuple[int, int]]:
        """Index ranges ``[i, j)`` of maximal runs of valid samples."""
        m = self.mask.astype(int)
        d = np.diff(np.concatenate([[0], m, [0]]))
        starts = np.flatnonzero(d == 1)
        ends = np.flatnonzero(d == -1)
        return list(zip(starts.tolist(), ends.tolist()))

    def to_csv_rows(self):
        n = self.velocities.shape[1]
        header = ["t", "mask", "value"] + [f"v_{i + 1}" for i in range(n)]
        rows = np.column_stack([self.t, self.mask.astype(float), self.values, self.velocities])
        return header, rows


def slice_times(tau: float, h_t: float) -> np.ndarray:
    k = int(np.floor(tau / h_t + 1e-9))
    return np.arange(-k, k + 1) * h_t


def _check_base(param: Parametrization, y: np.ndarray) -> None:
    off = np.abs(y @ param.xi)
    if np.any(off > 1e-9 * max(1.0, float(np.max(np.abs(y))))):
        raise SliceRangeError("base point must lie in the hyperplane orthogonal to xi")
    if np.any(np.linalg.norm(y, axis=-1) > param.rho * (1 + 1e-12)):
        raise SliceRangeError("base point outside the base disc")


def extract_slices(u: GridField, param: Parametrization, Y, h_t: float,
                   t_samples=None, use_analytic: bool = True) -> List[Slice1D]:
    """Slices through every base point in ``Y`` (rows in the hyperplane), integrated as one batch."""
    Y = np.array(Y, dtype=float, ndmin=2)
    _check_base(param, Y)
    t = slice_times(param.tau, h_t) if t_samples is None else np.asarray(t_samples, dtype=float)
    P, V = param.curve_samples(Y, t)
    m, q, n = P.shape
    vals = u.evaluate(P.reshape(-1, n), use_analytic).reshape(m, q, u.components)
    if u.components != n:
        raise ValueError("slices need a vector field with n components")
    w = np.einsum("mqi,mqi->mq", vals, V)
    mask = np.isfinite(w)
    h_space = 0.0 if (use_analytic and u.analytic is not None) else u.h
    out = []
    for k in range(m):
        Vk = V[k].copy()
        Vk[~mask[k]] = np.nan
        out.append(Slice1D(param.xi, Y[k], t, np.where(mask[k], w[k], np.nan), mask[k],
                           Vk, P[k], float(h_t), h_space))
    return out


def extract_slice(u: GridField, param: Parametrization, y, h_t: float,
                  use_analytic: bool = True) -> Slice1D:
    """Slice of ``u`` along the parametrizing curve launched from ``x0 + y``."""
    return extract_slices(u, param, np.asarray(y, dtype=float)[None], h_t,
                          use_analytic=use_analytic)[0]


def _bisect(param: Parametrization, indicator: Callable, y: np.ndarray, a: float,
            b: float, inside_at_a: bool, iters: int = 50) -> float:
    """Locate the indicator switch on ``[a, b]`` by bisection along the curve."""
    for _ in range(iters):
        mid = 0.5 * (a + b)
        X, _ = param.phi(y[None], np.array([mid]))
        hit = bool(np.all(np.isfinite(X[0]))) and bool(indicator(X)[0])
        if hit == inside_at_a:
            a = mid
        else:
            b = mid
        if abs(b - a) < 1e-13:
            break
    return 0.5 * (a + b)


def set_slice(indicator: Callable, param: Parametrization, y, h_t: float,
              refine: bool = True) -> List[Tuple[float, float]]:
    """Maximal parameter intervals where ``indicator`` holds along the curve.

    ``indicator`` maps points ``(k, n)`` to booleans; points where the curve
    is undefined count as outside. Endpoints are refined by bisection.
    """
    y = np.asarray(y, dtype=float)
    _check_base(param, y[None])
    t = slice_times(param.tau, h_t)
    P, _ = param.curve_samples(y[None], t)
    P = P[0]
    fin = np.all(np.isfinite(P), axis=1)
    ins = np.zeros(t.size, dtype=bool)
    if fin.any():
        ins[fin] = np.asarray(indicator(P[fin]), dtype=bool)
    d = np.diff(np.concatenate([[0], ins.astype(int), [0]]))
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1) - 1
    out = []
    for i, j in zip(starts, ends):
        lo, hi = float(t[i]), float(t[j])
        if refine and i > 0:
            lo = _bisect(param, indicator, y, float(t[i]), float(t[i - 1]), True)
        if refine and j < t.size - 1:
            hi = _bisect(param, indicator, y, float(t[j]), float(t[j + 1]), True)
        out.append((lo, hi))
    return out


def u_xi_field(u: GridField, proj: CurvilinearProjection, use_analytic: bool = True) -> GridField:
    """Scalar lattice field ``u(x) . xi_phi(x)`` on ``u``'s nodes.

    Nodes where the inversion fails are masked (``mask`` False, value 0).
    """
    nodes = u.nodes().reshape(-1, u.dim)
    _, _, vel, ok = proj.project(nodes)
    vals = u.evaluate(nodes, use_analytic)
    w = np.einsum("ki,ki->k", vals, np.where(ok[:, None], vel, 0.0))
    good = ok & np.isfinite(w)
    w = np.where(good, w, 0.0)
    return GridField(u.origin, u.spacing, u.shape, 1, w.reshape(u.shape + (1,)),
                     mask=good.reshape(u.shape))
