"""Command-line interface.

Subcommands: ``solve``, ``loop-test``, ``sweep-k``, ``kernel-eval`` and
``regen-quadrature``.  Settings come from an optional INI file (sections
``[mesh]``, ``[solver]``, ``[experiment]``, ``[grid]``) and are overridden by
flags.  Exit status: 0 on success, 2 when an accuracy contract fails, 1 on
errors.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .kernels import ORDER2, modal_kernel_pairs
from .quadrature import regenerate_log_rule
from .solver import Formulation, MeshConfig

logger = logging.getLogger("cavityscat")

EXIT_OK, EXIT_ERROR, EXIT_ACCURACY = 0, 1, 2
TABLE_COLUMNS = ["geometry", "k", "N_f", "N_pts", "N_tot", "T_matgen", "T_solve", "E_error"]

# option name -> (config section, type)
_OPTIONS = {
    "geometry": ("experiment", str),
    "k": ("experiment", float),
    "formulation": ("solver", str),
    "eps_modes": ("solver", float),
    "max_order": ("solver", int),
    "tolerance": ("experiment", float),
    "mode_scope": ("experiment", str),
    "seed": ("experiment", int),
    "n_points": ("experiment", int),
    "ks": ("experiment", str),
    "formulations": ("experiment", str),
    "eps_geom": ("mesh", float),
    "ppw": ("mesh", int),
    "max_panel_length": ("mesh", float),
    "gamma_panel_length": ("mesh", float),
    "near_factor": ("mesh", float),
    "grid_x": ("grid", str),
    "grid_z": ("grid", str),
    "grid_nx": ("grid", int),
    "grid_nz": ("grid", int),
}

_DEFAULTS = {
    "geometry": "example1", "k": 1.0, "formulation": "lowfreq", "eps_modes": 1e-9,
    "max_order": 200, "tolerance": None, "mode_scope": "axisymmetric",
    "seed": harness.DEFAULT_SEED, "n_points": 5,
    "ks": "1,1e-2,1e-4,1e-6,1e-8,1e-10", "formulations": "lowfreq,reduced",
    "grid_x": "0,3", "grid_z": "-1.5,2", "grid_nx": 31, "grid_nz": 36,
}


def load_config(path):
    """Read an INI file into a flat ``{option: value}`` dict."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(f"config file not found: {path}")
    out = {}
    for name, (section, typ) in _OPTIONS.items():
        if cp.has_option(section, name):
            out[name] = typ(cp.get(section, name))
    unknown = {f"{s}.{o}" for s in cp.sections() for o in cp.options(s)} - {
        f"{s}.{n}" for n, (s, _) in _OPTIONS.items()}
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return out


def resolve(args):
    """Merge defaults, config file and explicit flags (flags win)."""
    opts = dict(_DEFAULTS)
    if getattr(args, "config", None):
        opts.update(load_config(args.config))
    for name in _OPTIONS:
        val = getattr(args, name, None)
        if val is not None:
            opts[name] = val
    return opts


def mesh_config(opts, geometry, k):
    mc = harness.default_mesh(geometry, k)
    for name in ("eps_geom", "ppw", "max_panel_length", "gamma_panel_length", "near_factor"):
        if opts.get(name) is not None:
            setattr(mc, name, opts[name])
    return mc


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, complex):
        return [o.real, o.imag]
    raise TypeError(type(o))


def _write_table(path, reports):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        for rep in reports:
            d = rep.as_dict()
            w.writerow([d[c] for c in TABLE_COLUMNS])


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_solve(args):
    opts = resolve(args)
    out = _out_dir(args)
    geom, k = opts["geometry"], opts["k"]
    x0, x1 = _floats(opts["grid_x"])
    z0, z1 = _floats(opts["grid_z"])
    grid = (np.linspace(x0, x1, opts["grid_nx"]), np.linspace(z0, z1, opts["grid_nz"]))
    rep, sol, rows = harness.run_planewave(geom, k, opts["formulation"],
                                           mesh_config(opts, geom, k), opts["eps_modes"],
                                           grid=grid, max_order=opts["max_order"])
    _write_json(out / "report.json", rep.as_dict())
    _write_table(out / "table.csv", [rep])
    with (out / "field_grid.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(harness.FIELD_GRID_COLUMNS)
        w.writerows(rows.tolist())
    print(f"{geom} k={k:g}: N_f={rep.N_f} N_tot={rep.N_tot} max residual {rep.max_residual:.1e}")
    tol = sol.config.residual_tol
    return EXIT_ACCURACY if rep.max_residual > tol else EXIT_OK


def cmd_loop_test(args):
    opts = resolve(args)
    out = _out_dir(args)
    geom, k = opts["geometry"], opts["k"]
    rep, _ = harness.run_loop_test(geom, k, opts["mode_scope"], opts["formulation"],
                                   mesh_config(opts, geom, k), opts["n_points"], opts["seed"],
                                   opts["eps_modes"])
    _write_json(out / "report.json", rep.as_dict())
    _write_table(out / "table.csv", [rep])
    print(f"{geom} k={k:g} {rep.formulation}: E error {rep.E_error:.2e}")
    tol = opts["tolerance"]
    return EXIT_ACCURACY if tol is not None and not rep.E_error <= tol else EXIT_OK


def cmd_sweep_k(args):
    opts = resolve(args)
    out = _out_dir(args)
    geom = opts["geometry"]
    ks = _floats(opts["ks"])
    forms = [Formulation.parse(f).value for f in str(opts["formulations"]).split(",")]
    rows = harness.run_k_sweep(geom, ks, forms, mesh_config(opts, geom, 1.0),
                               opts["n_points"], opts["seed"])
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k"] + forms)
        for row in rows:
            w.writerow([row["k"]] + [row[f] for f in forms])
    for row in rows:
        print("k={:<8g} ".format(row["k"]) + " ".join(f"{f}={row[f]:.2e}" for f in forms))
    tol = opts["tolerance"]
    if tol is not None and Formulation.LOWFREQ.value in forms:
        if not all(row[Formulation.LOWFREQ.value] <= tol for row in rows):
            return EXIT_ACCURACY
    return EXIT_OK


def cmd_kernel_eval(args):
    derivs = tuple(args.derivs.split(",")) if args.derivs else ORDER2
    derivs = tuple("" if d == "0" else d for d in derivs)
    tab = modal_kernel_pairs(args.r, args.z, args.rp, args.zp, args.k, [args.m], derivs)[0, 0]
    result = {(d or "0"): {"G": tab[i, 0], "Gcos": tab[i, 1], "Gsin": tab[i, 2]}
              for i, d in enumerate(derivs)}
    print(json.dumps(result, indent=2, default=_json_default))
    return EXIT_OK if np.all(np.isfinite(tab)) else EXIT_ERROR


def cmd_regen_quadrature(args):
    err = regenerate_log_rule(path=args.path)
    print(f"log rule regenerated; moment error {err:.2e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(p, experiment=True):
    p.add_argument("--config", help="INI file with [mesh], [solver], [experiment], [grid]")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--geometry", help="example1, example2 or example3")
    p.add_argument("--formulation", choices=[f.value for f in Formulation])
    p.add_argument("--eps-geom", dest="eps_geom", type=float)
    p.add_argument("--ppw", type=int)
    p.add_argument("--max-panel-length", dest="max_panel_length", type=float)
    p.add_argument("--gamma-panel-length", dest="gamma_panel_length", type=float)
    p.add_argument("--near-factor", dest="near_factor", type=float)
    p.add_argument("--eps-modes", dest="eps_modes", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-points", dest="n_points", type=int)
    p.add_argument("--tolerance", type=float, help="accuracy contract (exit 2 if violated)")
    if experiment:
        p.add_argument("--k", type=float)


def build_parser():
    ap = argparse.ArgumentParser(prog="cavityscat", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="plane-wave scattering with field grid output")
    _common(p)
    p.add_argument("--incident", choices=["planewave"], default="planewave")
    p.add_argument("--max-order", dest="max_order", type=int)
    p.add_argument("--grid-x", dest="grid_x", help="xmin,xmax")
    p.add_argument("--grid-z", dest="grid_z", help="zmin,zmax")
    p.add_argument("--grid-nx", dest="grid_nx", type=int)
    p.add_argument("--grid-nz", dest="grid_nz", type=int)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("loop-test", help="manufactured current-loop test")
    _common(p)
    p.add_argument("--mode-scope", dest="mode_scope", choices=["axisymmetric", "offaxis"])
    p.set_defaults(func=cmd_loop_test)

    p = sub.add_parser("sweep-k", help="loop-test error versus k per formulation")
    _common(p, experiment=False)
    p.add_argument("--ks", help="comma-separated wavenumbers")
    p.add_argument("--formulations", help="comma-separated formulations")
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("kernel-eval", help="evaluate modal Green's function kernels")
    p.add_argument("--r", type=float, required=True)
    p.add_argument("--z", type=float, required=True)
    p.add_argument("--rp", type=float, required=True)
    p.add_argument("--zp", type=float, required=True)
    p.add_argument("--k", type=float, required=True)
    p.add_argument("--m", type=int, default=0)
    p.add_argument("--derivs", help="comma-separated, e.g. 0,r,z,rr (default: up to order 2)")
    p.set_defaults(func=cmd_kernel_eval)

    p = sub.add_parser("regen-quadrature", help="rebuild and validate the log-singular rule")
    p.add_argument("--path", help="output file (default: the packaged table)")
    p.set_defaults(func=cmd_regen_quadrature)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # report, do not dump a traceback at the user
        logger.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            raise
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
