"""Named synthetic fields and the bundled experiment configurations."""

from __future__ import annotations

import copy
import json
from importlib import resources
from typing import Callable, Dict, List, Optional

import numpy as np

from .bv1d import JumpField, LevelSet, Plane, Sphere
from .field import Box
from .gridfield import GridField

_A = np.array([[1.0, 2.0], [0.0, 3.0]])


def _cols(*cs):
    return np.column_stack(cs)


def flat_mild(X):
    """Affine field plus a small smooth perturbation."""
    return X @ _A.T + 0.1 * _cols(np.sin(X[:, 0]), X[:, 0] * X[:, 1])


def hyperbolic_x2(X):
    return _cols(np.zeros(len(X)), X[:, 1])


def hyperbolic_const(X):
    return _cols(np.zeros(len(X)), np.ones(len(X)))


def hyperbolic_smooth(X):
    return _cols(np.sin(X[:, 0]) * X[:, 1], X[:, 1] ** 2 + 0.3 * X[:, 0])


def sphere_smooth(X):
    return _cols(1 + 0.5 * X[:, 0] + X[:, 1], 0.3 * X[:, 0] - X[:, 1])


def flat_smooth(X):
    return _cols(np.sin(X[:, 0]) + X[:, 1] ** 2, X[:, 0] * X[:, 1])


BUILTIN_FIELDS: Dict[str, Callable] = {
    "flat-mild": flat_mild,
    "flat-smooth": flat_smooth,
    "hyperbolic-x2": hyperbolic_x2,
    "hyperbolic-const": hyperbolic_const,
    "hyperbolic-smooth": hyperbolic_smooth,
    "sphere-smooth": sphere_smooth,
}


def _affine(A, b=None) -> Callable:
    A = np.asarray(A, dtype=float)
    b = np.zeros(A.shape[0]) if b is None else np.asarray(b, dtype=float)
    return lambda X: np.array(X, dtype=float, ndmin=2) @ A.T + b


def surface_from_config(doc: dict):
    kind = doc["kind"]
    if kind == "plane":
        return Plane(doc["normal"], doc["offset"])
    if kind == "sphere":
        return Sphere(doc["center"], doc["radius"])
    if kind == "quadric":
        # x.Q x + q.x + c
        Q = np.asarray(doc["Q"], dtype=float)
        q = np.asarray(doc.get("q", np.zeros(Q.shape[0])), dtype=float)
        c = float(doc.get("c", 0.0))
        return LevelSet(lambda X: np.einsum("ki,ij,kj->k", X, Q, X) + X @ q + c,
                        lambda X: X @ (Q + Q.T) + q)
    raise ValueError(f"unknown surface kind {kind!r}")


def vector_callable(doc: dict) -> Callable:
    """Smooth vector field ``X (k, n) -> (k, n)`` from a field document."""
    kind = doc.get("kind", "builtin")
    if kind == "affine":
        return _affine(doc["A"], doc.get("b"))
    if kind == "constant":
        c = np.asarray(doc["value"], dtype=float)
        return lambda X: np.tile(c, (len(np.atleast_2d(X)), 1))
    if kind == "builtin":
        name = doc["name"]
        if name not in BUILTIN_FIELDS:
            raise ValueError(f"unknown builtin field {name!r}")
        return BUILTIN_FIELDS[name]
    if kind == "jump":
        return jump_field_from_config(doc)
    raise ValueError(f"unknown vector field kind {kind!r}")


def jump_field_from_config(doc: dict) -> JumpField:
    return JumpField(surface_from_config(doc["surface"]), vector_callable(doc["plus"]),
                     vector_callable(doc["minus"]), float(doc.get("lipschitz", 0.0)))


def grid_from_config(doc: dict, base_dir: str = ".") -> GridField:
    """Sample a field document on its grid, or load a stored grid file."""
    if doc.get("kind") == "file":
        import os
        return GridField.load(os.path.join(base_dir, doc["path"]))
    g = doc["grid"]
    box = Box(np.asarray(g["lo"], dtype=float), np.asarray(g["hi"], dtype=float))
    fn = vector_callable(doc)
    analytic = bool(g.get("analytic", True)) and doc.get("kind") != "jump"
    return GridField.from_function(fn, box, float(g["h"]), keep_analytic=analytic)


# ----------------------------------------------------------- bundled recipes

def recipe_names() -> List[str]:
    files = resources.files("curvislice").joinpath("recipes").iterdir()
    return sorted(p.name[:-5] for p in files if p.name.endswith(".json"))


def load_recipe(name: str) -> dict:
    path = resources.files("curvislice").joinpath("recipes", name + ".json")
    if not path.is_file():
        raise KeyError(name)
    return json.loads(path.read_text())


def smooth_bound_recipes() -> List[dict]:
    """Bundled configurations whose ``bounds`` section takes part in verification."""
    out = []
    for name in recipe_names():
        doc = load_recipe(name)
        if doc.get("bounds", {}).get("verify", False):
            out.append(doc)
    return out


def merged(base: dict, overrides: Optional[dict]) -> dict:
    out = copy.deepcopy(base)
    for k, v in (overrides or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merged(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out
