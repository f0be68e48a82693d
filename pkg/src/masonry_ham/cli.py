"""Batch command-line entry point.

Subcommands: mesh generation, transient wall simulation, single-case
homogenization, parameter sweeps, and two-stage inverse identification.
Every run writes its outputs plus a manifest.json recording the resolved
configuration, mesh hash, parameter provenance, seed, package version and
wall clock, so any output file can be traced to exactly one run.

Exit codes: 0 success, 2 usage/configuration error, 3 numerical failure
(diagnostics still written).
"""

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from . import config as cfgmod
from . import experiment as exp
from . import homogenization as hom
from . import identify as ident
from . import mesh as msh
from .errors import (ConfigError, ConvergenceError, DomainError, MeshError,
                     ParameterError, StepRejection)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

_CONFIG_ERRORS = (ConfigError, ParameterError, MeshError)
_NUMERICAL_ERRORS = (ConvergenceError, DomainError, StepRejection,
                     FloatingPointError)


# ------------------------------------------------------------------ manifest

def mesh_digest(mesh) -> str:
    """Stable content hash of a mesh (geometry, topology, markers)."""
    h = hashlib.sha256()
    h.update(f"{mesh.phase_names}".encode())
    for arr in (mesh.nodes, mesh.triangles, mesh.tri_phase, mesh.interfaces,
                mesh.interface_id, mesh.boundary_edges, mesh.boundary_marker,
                mesh.periodic_pairs):
        a = np.ascontiguousarray(arr)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


class _Clock:
    """Start time of one command, stamped into its manifest."""

    def __init__(self):
        self.started_utc = datetime.now(timezone.utc).isoformat(
            timespec="seconds")
        self._t0 = time.perf_counter()

    @property
    def elapsed_s(self):
        return time.perf_counter() - self._t0


def write_manifest(out_dir, *, command, config, clock, mesh=None, seed=None,
                   provenance=None, outputs=(), status="ok", error=None,
                   extra=None):
    """Write manifest.json describing one run; returns its path."""
    payload = {
        "command": command,
        "tool": {"name": "masonry-ham", "version": __version__},
        "schema_version": cfgmod.SCHEMA_VERSION,
        "config": config,
        "mesh_hash": mesh_digest(mesh) if mesh is not None else None,
        "parameter_provenance": provenance,
        "seed": seed,
        "started_utc": clock.started_utc,
        "wall_clock_s": clock.elapsed_s,
        "outputs": sorted(os.path.basename(p) for p in outputs),
        "status": status,
        "error": error,
    }
    if extra:
        payload.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return path


# ----------------------------------------------------------------- commands

def _prepare(args, need_mesh=True):
    """Load config, build params and mesh; shared by all subcommands."""
    cfg = cfgmod.load_config(args.config)
    params, provenance = cfgmod.params_from_config(cfg)
    if getattr(args, "perfect_contact", False):
        params = params.with_interface(perfect=True)
        provenance["interface.perfect"] = "user"
    mesh = None
    if need_mesh:
        if getattr(args, "mesh", None):
            mesh = msh.load_text(args.mesh)
        else:
            mesh = cfgmod.mesh_from_config(cfg)
        msh.validate(mesh)
    os.makedirs(args.out, exist_ok=True)
    return cfg, params, provenance, mesh


def cmd_mesh(args):
    clock = _Clock()
    cfg = cfgmod.load_config(args.config)
    mesh = cfgmod.mesh_from_config(cfg)
    msh.validate(mesh)
    os.makedirs(args.out, exist_ok=True)
    mesh_path = os.path.join(args.out, "mesh.txt")
    msh.save_text(mesh, mesh_path)
    write_manifest(args.out, command="mesh", config=cfg, mesh=mesh,
                   outputs=[mesh_path], clock=clock,
                   extra={"mesh_stats": {"n_nodes": mesh.n_nodes,
                                         "n_triangles": mesh.n_triangles,
                                         "n_interfaces": len(mesh.interfaces),
                                         "periodic_pairs":
                                             len(mesh.periodic_pairs)}})
    print(f"mesh: {mesh.n_nodes} nodes, {mesh.n_triangles} triangles -> "
          f"{mesh_path}")
    return EXIT_OK


def cmd_solve(args):
    clock = _Clock()
    cfg, params, provenance, mesh = _prepare(args)
    base_dir = os.path.dirname(os.path.abspath(args.config))
    climate, layout, kwargs = cfgmod.experiment_from_config(cfg, base_dir)
    traces_path = os.path.join(args.out, "traces.csv")
    jumps_path = os.path.join(args.out, "jumps.csv")
    try:
        result = exp.run_experiment(mesh, climate, layout, params, **kwargs)
    except _NUMERICAL_ERRORS as e:
        write_manifest(args.out, command="solve", config=cfg, mesh=mesh,
                       provenance=provenance, clock=clock,
                       status="failed", error=f"{type(e).__name__}: {e}")
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    exp.write_traces_csv(traces_path, result)
    outputs = [traces_path]
    if layout.pairs:
        exp.write_jumps_csv(jumps_path, result)
        outputs.append(jumps_path)
    write_manifest(args.out, command="solve", config=cfg, mesh=mesh,
                   provenance=provenance, outputs=outputs, clock=clock,
                   extra={"run_info": result.info})
    print(f"solve: {result.times.size} output samples, "
          f"{result.info['newton_iterations']} iterations -> {traces_path}")
    return EXIT_OK


def _write_single_case_csv(args, mesh, lc, params):
    iset = {"perfect": params.interface.perfect}
    if not params.interface.perfect:
        iset.update(alpha_int=params.interface.alpha_int,
                    beta_int=params.interface.beta_int)
    csv_path = os.path.join(args.out, "homogenize.csv")
    rows = hom.sweep(mesh, [lc], [iset], params, csv_path=csv_path,
                     meta={"command": "homogenize"})
    return rows, csv_path


def cmd_homogenize(args):
    clock = _Clock()
    cfg, params, provenance, mesh = _prepare(args)
    lc = cfgmod.load_case_from_config(cfg, bc_override=args.bc)
    rows, csv_path = _write_single_case_csv(args, mesh, lc, params)
    row = rows[0]
    status = "ok" if row["status"] == "ok" else "failed"
    write_manifest(args.out, command="homogenize", config=cfg, mesh=mesh,
                   provenance=provenance, outputs=[csv_path],
                   clock=clock, status=status,
                   error=None if status == "ok" else row["status"])
    if status != "ok":
        print(f"numerical failure: {row['status']}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"homogenize: K_tt_xx = {row['KM_tt_xx']:.6g}, "
          f"K_pp_xx = {row['KM_pp_xx']:.6g}, "
          f"hill_mandel = {row['hill_mandel_residual']:.2e} -> {csv_path}")
    return EXIT_OK


def cmd_sweep(args):
    clock = _Clock()
    cfg, params, provenance, mesh = _prepare(args)
    cases, isets = cfgmod.sweep_cases_from_config(cfg, bc_override=args.bc)
    if getattr(args, "perfect_contact", False):
        isets = [{"perfect": True}]
    csv_path = os.path.join(args.out, "sweep.csv")
    rows = hom.sweep(mesh, cases, isets, params, csv_path=csv_path,
                     meta={"command": "sweep"})
    n_failed = sum(r["status"] != "ok" for r in rows)
    status = "ok" if n_failed < len(rows) else "failed"
    write_manifest(args.out, command="sweep", config=cfg, mesh=mesh,
                   provenance=provenance, outputs=[csv_path],
                   clock=clock, status=status,
                   error=None if status == "ok"
                   else f"all {len(rows)} cases failed",
                   extra={"n_cases": len(rows), "n_failed": n_failed})
    print(f"sweep: {len(rows)} cases, {n_failed} failed -> {csv_path}")
    return EXIT_NUMERICAL if status == "failed" else EXIT_OK


def cmd_identify(args):
    clock = _Clock()
    cfg, params, provenance, mesh = _prepare(args)
    base_dir = os.path.dirname(os.path.abspath(args.config))
    thermal, moisture, options = cfgmod.identify_from_config(
        cfg, mesh, params, base_dir)
    if args.seed is not None:
        options["seed"] = args.seed
    report = ident.identify_two_stage(*thermal, *moisture,
                                      n=options["n"], seed=options["seed"],
                                      k=options["k"], n_jobs=args.jobs)
    outputs = []
    for stage_name, pool in (("thermal", report.thermal),
                             ("moisture", report.moisture)):
        path = os.path.join(args.out, f"{stage_name}_results.csv")
        ident.write_results_csv(path, pool)
        outputs.append(path)
    summary_path = os.path.join(args.out, "summary.json")
    ident.write_summary_json(summary_path, report)
    outputs.append(summary_path)
    all_failed = (not math.isfinite(report.info["thermal_objective"])
                  or not math.isfinite(report.info["moisture_objective"]))
    status = "failed" if all_failed else "ok"
    write_manifest(args.out, command="identify", config=cfg, mesh=mesh,
                   provenance=provenance, seed=options["seed"],
                   outputs=outputs, clock=clock, status=status,
                   error="a stage has no finite-objective realization"
                   if all_failed else None,
                   extra={"identify_info": report.info})
    if all_failed:
        print("numerical failure: no realization completed", file=sys.stderr)
        return EXIT_NUMERICAL
    best = ", ".join(f"{k}={v:.6g}" for k, v in
                     sorted(report.best_params.items()))
    print(f"identify: best [{best}] -> {summary_path}")
    return EXIT_OK


# --------------------------------------------------------------------- main

def build_parser():
    parser = argparse.ArgumentParser(
        prog="masonry-ham",
        description="Coupled heat and moisture transport in brick-mortar "
                    "masonry: transient simulation, unit-cell "
                    "homogenization, parameter sweeps, identification.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, *, needs_mesh_flag=True, needs_bc=False,
            needs_seed=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True,
                       help="YAML run configuration")
        p.add_argument("--out", required=True, help="output directory")
        if needs_mesh_flag:
            p.add_argument("--mesh", default=None,
                           help="mesh file (overrides the config's "
                                "mesh section)")
            p.add_argument("--perfect-contact", action="store_true",
                           help="force perfectly bonded interfaces")
        if needs_bc:
            p.add_argument("--bc", choices=("dirichlet", "periodic"),
                           default=None, help="fluctuation boundary "
                                              "condition override")
        if needs_seed:
            p.add_argument("--seed", type=int, default=None,
                           help="sampling seed (overrides config)")
            p.add_argument("--jobs", type=int,
                           default=os.cpu_count() or 1,
                           help="parallel forward runs (default: cores)")
        p.set_defaults(fn=fn)
        return p

    add("mesh", cmd_mesh, "generate and save a mesh",
        needs_mesh_flag=False)
    add("solve", cmd_solve, "run a transient wall experiment")
    add("homogenize", cmd_homogenize,
        "effective conductivity for one macroscopic load case",
        needs_bc=True)
    add("sweep", cmd_sweep,
        "homogenization sweep over load cases and interface parameters",
        needs_bc=True)
    add("identify", cmd_identify,
        "two-stage inverse identification from observed traces",
        needs_seed=True)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except _CONFIG_ERRORS as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"configuration error: missing file: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERICAL_ERRORS as e:
        print(f"numerical failure: {type(e).__name__}: {e}",
              file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
