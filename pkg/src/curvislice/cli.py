"""Command-line driver: ``curvislice <subcommand> [--recipe NAME | --config FILE] ...``.

Exit status 0 on success, 1 on a numerical failure (a JSON error report is
written to stdout), 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from importlib import resources
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import acceptance
from .bv1d import analyze_slice, eta_xi, integral_geometric, jump_slicing_check, mu_xi_u
from .field import Box, QuadraticSurface, field_from_config
from .geodesics import ODESettings, integrate
from .gridfield import GridField, extract_slice
from .parallel import get_threads, set_threads
from .projections import (build_family, lipschitz_estimate, projection_table,
                          transversality_probe)
from .recipes import (grid_from_config, jump_field_from_config, load_recipe, merged, recipe_names,
                      vector_callable)
from .symgrad import (GradientReport, bound_checks, reconstruct_e, reconstruct_e_batch,
                      shell_egradient, shell_limit)

SUBCOMMANDS = ("shoot", "family", "slice", "jumps", "symgrad", "measure", "shell", "verify")


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    """Raised when a run completes but its checks fail."""

    def __init__(self, message: str, report: dict):
        super().__init__(message)
        self.report = report


# ------------------------------------------------------------------ config

def load_schema(name: str) -> dict:
    path = resources.files("curvislice").joinpath("schemas", name + ".schema.json")
    return json.loads(path.read_text())


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_dotted(doc: dict, path: str, value) -> None:
    """Assign ``value`` at a dotted key path, creating intermediate objects."""
    keys = path.split(".")
    cur = doc
    for k in keys[:-1]:
        nxt = cur.get(k)
        if not isinstance(nxt, dict):
            nxt = {}
            cur[k] = nxt
        cur = nxt
    cur[keys[-1]] = value


def build_config(recipe: Optional[str], config_path: Optional[str],
                 overrides: List[str]) -> Tuple[dict, str]:
    """Merge recipe or file with dotted overrides and validate against the schema."""
    import jsonschema

    base_dir = "."
    if config_path is not None:
        try:
            with open(config_path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        base_dir = os.path.dirname(os.path.abspath(config_path))
    elif recipe is not None:
        try:
            doc = load_recipe(recipe)
        except KeyError:
            raise ConfigError(f"unknown recipe {recipe!r}; available: {', '.join(recipe_names())}")
    else:
        doc = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        key, val = item.split("=", 1)
        set_dotted(doc, key, _parse_value(val))
    doc.setdefault("seed", 0)
    try:
        jsonschema.validate(doc, load_schema("config"))
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc
    return doc, base_dir


def _need(cfg: dict, *keys):
    for k in keys:
        if k not in cfg:
            raise ConfigError(f"config needs a {k!r} section")
    return [cfg[k] for k in keys]


def _box(doc) -> Box:
    return Box(np.asarray(doc["lo"], dtype=float), np.asarray(doc["hi"], dtype=float))


def _settings(doc: dict) -> ODESettings:
    keys = ("rel_tol", "abs_tol", "max_step", "method", "fixed_step")
    return ODESettings(**{k: doc[k] for k in keys if k in doc})


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        v = float(x)
        return v if np.isfinite(v) else None
    return x


def dumps(doc) -> str:
    return json.dumps(_jsonable(doc), sort_keys=True, indent=2) + "\n"


# -------------------------------------------------------------- plot data

class PlotData:
    """Long-format rows ``series, index, x, y`` for external plotting."""

    def __init__(self):
        self.rows: List[tuple] = []

    def add(self, series: str, x, y) -> None:
        for i, (a, b) in enumerate(zip(np.ravel(x), np.ravel(y))):
            self.rows.append((series, i, float(a), float(b)))

    def write(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["series", "index", "x", "y"])
            for s, i, a, b in self.rows:
                w.writerow([s, i, repr(a), repr(b)])


def _write_table(path: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in np.atleast_2d(rows):
            w.writerow([repr(float(v)) for v in r])


# ------------------------------------------------------------ subcommands

class Context:
    def __init__(self, cfg: dict, base_dir: str, out_dir: Optional[str], threads: Optional[int]):
        self.cfg = cfg
        self.base_dir = base_dir
        self.out_dir = out_dir
        self.threads = threads
        self.plot = PlotData()
        self._field = None

    def field(self):
        if self._field is None:
            (fd,) = _need(self.cfg, "field")
            self._field = field_from_config(fd)
        return self._field

    def family(self):
        (fd,) = _need(self.cfg, "family")
        F, _ = self.field()
        return build_family(F, fd["x0"], fd["R0"], fd.get("n_dirs"),
                            _settings(self.cfg.get("ode", {})), threads=self.threads)

    def u(self) -> GridField:
        (ud,) = _need(self.cfg, "u")
        return grid_from_config(ud, self.base_dir)

    def artifact(self, name: str) -> Optional[str]:
        if self.out_dir is None:
            return None
        os.makedirs(self.out_dir, exist_ok=True)
        return os.path.join(self.out_dir, name)


def cmd_shoot(ctx: Context) -> dict:
    (sd,) = _need(ctx.cfg, "shoot")
    F, _ = ctx.field()
    tr = integrate(F, sd["x0"], sd["v0"], tuple(sd.get("t_span", (0.0, 1.0))),
                   _settings(ctx.cfg.get("ode", {})))
    header, rows = tr.to_csv_rows()
    path = ctx.artifact("trajectory.csv")
    if path:
        _write_table(path, header, rows)
    for i in range(tr.positions.shape[1]):
        ctx.plot.add(f"x_{i + 1}", tr.t_samples, tr.positions[:, i])
        ctx.plot.add(f"v_{i + 1}", tr.t_samples, tr.velocities[:, i])
    return {"t_span": list(tr.t_span), "truncated": tr.truncated, "steps": int(tr.t_samples.size),
            "end_position": tr.positions[-1], "end_velocity": tr.velocities[-1],
            "start_position": tr.positions[0], "ode_residual": tr.ode_residual(F)}


def cmd_family(ctx: Context) -> dict:
    fam = ctx.family()
    fd = ctx.cfg["family"]
    half = fam.R0 / np.sqrt(fam.dim)
    U = Box(fam.x0 - half, fam.x0 + half)
    lips = [lipschitz_estimate(p, U, 100, seed=ctx.cfg["seed"]) for p in fam.projections]
    rng = np.random.default_rng(ctx.cfg["seed"])
    d = rng.standard_normal((64, fam.dim))
    probes = fam.x0 + fam.R0 * d / np.linalg.norm(d, axis=1, keepdims=True) * \
        rng.uniform(size=(64, 1)) ** (1 / fam.dim)
    rt = 0.0
    for p in fam.projections:
        y, t, _, ok = p.project(probes)
        back, _ = p.param.phi(y[ok], t[ok])
        rt = max(rt, float(np.max(np.linalg.norm(back - probes[ok], axis=1))))
    out = {"R0": fam.R0, "n_dirs": len(fam), "x0": fam.x0, "directions": fam.directions,
           "lipschitz": lips, "round_trip_max": rt}
    if fd.get("transversality", False):
        tp = transversality_probe(fam, seed=ctx.cfg["seed"])
        out["transversality"] = {"h1_first": tp.h1_first, "h1_second": tp.h1_second,
                                 "h3_first": tp.h3_first, "h3_second": tp.h3_second,
                                 "h2_margin": {str(k): v for k, v in tp.h2_margin.items()},
                                 "passed": tp.passed}
    path = ctx.artifact("projection_table.csv")
    if path:
        header, rows = projection_table(fam)
        _write_table(path, header, rows)
    for k, xi in enumerate(fam.directions):
        ctx.plot.add(f"direction_{k}", [xi[0]], [xi[1] if fam.dim > 1 else 0.0])
    return out


def _slice_settings(ctx: Context) -> dict:
    return ctx.cfg.get("slice", {})


def cmd_slice(ctx: Context) -> dict:
    sd = _slice_settings(ctx)
    fam = ctx.family()
    u = ctx.u()
    k = int(sd.get("direction", 0))
    if not 0 <= k < len(fam):
        raise ConfigError(f"slice.direction must lie in [0, {len(fam) - 1}]")
    par = fam.projections[k].param
    y = par.y_from_coords(np.asarray(sd.get("y", [0.0] * (fam.dim - 1)), dtype=float))
    h_t = sd.get("h_t") or u.h / 2
    s = extract_slice(u, par, y, h_t, use_analytic=sd.get("use_analytic", True))
    an = analyze_slice(s, sd.get("jump_threshold"), sd.get("window", 3), strict=False)
    path = ctx.artifact("slice.csv")
    if path:
        header, rows = s.to_csv_rows()
        _write_table(path, header, rows)
    ctx.plot.add("slice", s.t[s.mask], s.values[s.mask])
    return {"direction": fam.directions[k], "y": y, "h_t": h_t, "samples": int(s.mask.sum()),
            "variation": an.variation, "mu_total": an.measure.total,
            "jumps": [{"t": j.t_jump, "left": j.left_value, "right": j.right_value,
                       "amplitude": j.amplitude} for j in an.jumps]}


def cmd_jumps(ctx: Context) -> dict:
    jd = ctx.cfg.get("jumps", {})
    (ud,) = _need(ctx.cfg, "u")
    if ud.get("kind") != "jump":
        raise ConfigError("jumps needs a u field of kind 'jump'")
    fam = ctx.family()
    jf = jump_field_from_config(ud)
    u = ctx.u()
    rep = jump_slicing_check(u, jf, fam, int(jd.get("n_slices", 200)), seed=ctx.cfg["seed"],
                             window=int(jd.get("window", 3)),
                             angle_min_deg=float(jd.get("angle_min_deg", 5.0)))
    out = rep.to_dict()
    out["h"] = u.h
    out["missed"] = rep.details
    return out


def _report_dict(r: GradientReport) -> dict:
    return {"x": r.x, "e": r.e_of_u.matrix(), "tilde_e": r.tilde_matrix(), "residual": r.residual,
            "cond": r.cond, "directions_used": r.directions_used, "blocked": r.blocked}


def cmd_symgrad(ctx: Context) -> dict:
    sd = ctx.cfg.get("symgrad", {})
    u = ctx.u()
    ua = bool(sd.get("use_analytic", True))
    out: Dict[str, object] = {}
    pts = sd.get("points", [])
    if pts:
        fam = ctx.family()
        reps = [reconstruct_e(u, np.asarray(p, dtype=float), fam, use_analytic=ua) for p in pts]
        out["points"] = [_report_dict(r) for r in reps]
    if "grid" in sd:
        gd = sd["grid"]
        F, _ = ctx.field()
        box = _box(gd)
        probe = GridField.from_function(lambda X: np.zeros((len(X), 1)), box, gd["h"])
        X = probe.nodes().reshape(-1, probe.dim)
        fam = build_family(F, box.center, 0.55 * box.diameter, ctx.cfg.get("family", {}).get("n_dirs"),
                           threads=ctx.threads)
        reps = reconstruct_e_batch(u, X, fam, use_analytic=ua, on_error="skip")
        n = probe.dim
        iu = np.triu_indices(n)
        vals = np.full((X.shape[0], len(iu[0])), np.nan)
        for i, r in enumerate(reps):
            if isinstance(r, GradientReport):
                vals[i] = r.e_of_u.matrix()[iu]
        mask = np.all(np.isfinite(vals), axis=1)
        g = GridField(probe.origin, probe.spacing, probe.shape, len(iu[0]),
                      np.where(mask[:, None], vals, 0.0), mask=mask.reshape(probe.shape))
        path = ctx.artifact("gradient_field.json")
        if path:
            g.save(path)
        out["grid"] = {"nodes": int(X.shape[0]), "reconstructed": int(mask.sum()),
                       "max_residual": max((r.residual for r in reps if isinstance(r, GradientReport)),
                                           default=0.0)}
    if sd.get("bounds", False):
        (bd,) = _need(ctx.cfg, "bounds")
        F, _ = ctx.field()
        ub = u
        if "grid" in bd:
            ub = grid_from_config(merged(ctx.cfg["u"], {"grid": bd["grid"]}), ctx.base_dir)
        rep = bound_checks(ub, F, _box(bd["box"]), cells=bd.get("cells", 2), use_analytic=ua,
                           threads=ctx.threads)
        out["bounds"] = rep.to_dict()
    if not out:
        raise ConfigError("symgrad needs points, a grid or bounds")
    for i, p in enumerate(out.get("points", [])):
        E = np.asarray(p["e"])
        ctx.plot.add(f"point_{i}_e", np.arange(E.size), E.ravel())
    return out


def cmd_measure(ctx: Context) -> dict:
    md = ctx.cfg.get("measure", {})
    fam = ctx.family()
    u = ctx.u()
    region = _box(md["region"]) if md.get("region") else None
    ua = bool(md.get("use_analytic", True))
    k = md.get("direction")
    ks = range(len(fam)) if k is None else [int(k)]
    per = []
    for i in ks:
        if not 0 <= i < len(fam):
            raise ConfigError(f"measure.direction must lie in [0, {len(fam) - 1}]")
        p = fam.projections[i]
        per.append({"index": i, "xi": fam.directions[i],
                    "mu": mu_xi_u(u, p, region=region, use_analytic=ua),
                    "eta": eta_xi(u, p, region=region, use_analytic=ua)})
    ig = integral_geometric(u, fam, region, use_analytic=ua, threads=ctx.threads)
    ctx.plot.add("mu", [d["index"] for d in per], [d["mu"] for d in per])
    ctx.plot.add("eta", [d["index"] for d in per], [d["eta"] for d in per])
    return {"per_direction": per, "integral_geometric": ig}


def cmd_shell(ctx: Context) -> dict:
    (sd,) = _need(ctx.cfg, "shell")
    th = sd.get("theta", {})
    theta = QuadraticSurface(th.get("A", np.zeros((2, 2))), th.get("b", np.zeros(2)))
    u = vector_callable(sd["u"])
    pts = np.asarray(sd["points"], dtype=float)
    lim = shell_limit(u, theta, pts)
    sweep = []
    for rho in sd.get("rho", [1.0, 0.1, 0.01]):
        g = shell_egradient(u, float(rho), theta, pts)
        diff = float(np.max(np.abs(g.e_ab - lim)))
        sweep.append({"rho": rho, "e_ab": g.e_ab, "e_a3": g.e_a3, "e_33": g.e_33,
                      "limit_difference": diff})
    rhos = np.array([s["rho"] for s in sweep], dtype=float)
    diffs = np.array([s["limit_difference"] for s in sweep])
    ctx.plot.add("limit_difference", rhos, diffs)
    order = (float(np.polyfit(np.log(rhos), np.log(diffs), 1)[0])
             if len(rhos) > 1 and np.all(diffs > 0) else None)
    return {"points": pts, "limit": lim, "sweep": sweep, "order": order}


def cmd_verify(ctx: Context) -> dict:
    vd = ctx.cfg.get("verify", {})
    crit = vd.get("criteria", "all")
    ids = sorted(acceptance.CRITERIA) if crit == "all" else [int(k) for k in crit]
    if vd.get("smoke_n3", False):
        ids.append(acceptance.SMOKE_ID)
    results = []
    for k in ids:
        if k not in acceptance.CRITERIA and k != acceptance.SMOKE_ID:
            raise ConfigError(f"unknown criterion {k}")
        c = acceptance.run_criterion(k, ctx.threads)
        print(c.line(), file=sys.stderr, flush=True)
        results.append(c)
    out = {"criteria": [c.to_dict() for c in results],
           "passed": all(c.passed for c in results)}
    if not out["passed"]:
        raise NumericalFailure("acceptance criteria failed", out)
    return out


COMMANDS: Dict[str, Callable[[Context], dict]] = {
    "shoot": cmd_shoot, "family": cmd_family, "slice": cmd_slice, "jumps": cmd_jumps,
    "symgrad": cmd_symgrad, "measure": cmd_measure, "shell": cmd_shell, "verify": cmd_verify,
}


# ------------------------------------------------------------------- main

def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="curvislice",
                                 description="Curvilinear slicing experiments.")
    ap.add_argument("command", choices=SUBCOMMANDS)
    src = ap.add_mutually_exclusive_group()
    src.add_argument("--recipe", help="bundled configuration name")
    src.add_argument("--config", help="JSON configuration file")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config entry by dotted path (value parsed as JSON)")
    ap.add_argument("--threads", type=int, default=None,
                    help="worker threads (default: $CURVISLICE_THREADS or 1)")
    ap.add_argument("--out", help="write the JSON report here instead of stdout")
    ap.add_argument("--out-dir", help="directory for CSV and grid artifacts")
    ap.add_argument("--plot-data", help="write long-format CSV plot data here")
    ap.add_argument("--list-recipes", action="store_true", help=argparse.SUPPRESS)
    return ap


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def main(argv: Optional[List[str]] = None) -> int:
    ap = make_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        cfg, base_dir = build_config(args.recipe, args.config, args.overrides)
        threads = args.threads if args.threads is not None else cfg.get("threads")
        if threads is not None and threads < 1:
            raise ConfigError("threads must be positive")
        set_threads(threads)
        ctx = Context(cfg, base_dir, args.out_dir, get_threads())
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        report = COMMANDS[args.command](ctx)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalFailure as exc:
        _emit(dumps({"command": args.command, "error": {"type": "NumericalFailure",
                                                          "message": str(exc)},
                     "report": exc.report}), args.out)
        return 1
    except (KeyError, TypeError) as exc:
        print(f"config error: missing or malformed entry {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # numerical failures surface as a JSON error report
        _emit(dumps({"command": args.command,
                     "error": {"type": type(exc).__name__, "message": str(exc)}}), args.out)
        return 1
    doc = {"command": args.command, "config": cfg.get("name"), "seed": cfg["seed"],
           "report": report}
    _emit(dumps(doc), args.out)
    if args.plot_data:
        ctx.plot.write(args.plot_data)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
