"""Command-line entry point: ``phasefrac run`` and ``phasefrac study``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import sim
from .fespace import SolverError
from .mesh import MeshError


EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2

CONVERGENCE_COLUMNS = ["series", "stage", "nodes", "err_phi", "err_u"]
EFFICIENCY_COLUMNS = ["eps", "stage", "dofs", "eta_phi", "err_eps", "index_robust",
                      "eta_std", "err_h1", "index_standard"]
SUMMARY_COLUMNS = ["stage", "cells", "dofs", "eta_phi_max", "eta_u_max", "peak_load"]


# ----------------------------------------------------------------------
# VTK
# ----------------------------------------------------------------------
def write_vtk(path, dofs, state):
    """Legacy ASCII unstructured grid with nodal phi, u, contact class and
    estimator values.  Hanging vertices get interpolated estimator values and
    contact class -1."""
    m = dofs.mesh
    nv, nc = m.n_vertices, m.n_cells
    phi = dofs.vertex_values(state.phi)
    u = dofs.vertex_values(state.u)
    cls = np.full(nv, -1, dtype=np.int64)
    cls[dofs.dof_vertex] = state.classes
    eta = np.zeros(nv) if state.eta_phi is None else dofs.vertex_values(state.eta_phi.local)
    eta_u = np.zeros(nv) if state.eta_u is None else dofs.vertex_values(state.eta_u.local)
    lines = ["# vtk DataFile Version 3.0", f"phase field step {state.n}", "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {nv} double"]
    lines += [f"{x!r} {y!r} 0" for x, y in m.vertices]
    lines.append(f"CELLS {nc} {5 * nc}")
    lines += ["4 " + " ".join(str(v) for v in cv) for cv in m.cell_vertices]
    lines.append(f"CELL_TYPES {nc}")
    lines += ["9"] * nc
    lines.append(f"POINT_DATA {nv}")
    for name, data in (("phi", phi), ("eta_phi", eta), ("eta_u", eta_u)):
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [repr(float(v)) for v in data]
    lines += ["SCALARS contact int 1", "LOOKUP_TABLE default"]
    lines += [str(int(v)) for v in cls]
    lines.append("VECTORS u double")
    lines += [f"{a!r} {b!r} 0" for a, b in u]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------
def _config(args):
    cfg = sim.load_config(args.config, args.preset)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _short(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.4g}"
    return str(v)


def _table(header, rows):
    cells = [[_short(v) for v in r] for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) for i, h in enumerate(header)]
    out = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    out += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    return "\n".join(out)


def cmd_run(args):
    cfg = _config(args)
    out = Path(cfg.out_dir)
    every = args.vtk_every

    def callback(stage, st, dofs):
        if every and (st.n % every == 0 or st.n == cfg.steps):
            sub = out / f"stage{stage}" if cfg.stages else out
            write_vtk(sub / "vtk" / f"step{st.n:04d}.vtk", dofs, st)

    stages = sim.adaptive_loop(cfg, keep=set(), callback=callback)
    summary = []
    for st in stages:
        if cfg.stages:
            sim.write_run(out / f"stage{st.index}", st.states)
        eta_phi = max((s.eta_phi.total for s in st.states), default=0.0)
        eta_u = max((s.eta_u.total for s in st.states), default=0.0)
        peak = max((s.load for s in st.states), default=0.0)
        summary.append([st.index, st.mesh.n_cells, st.n_nodes, eta_phi, eta_u, peak])
    sim.write_run(out, stages[-1].states)
    sim.write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary)
    print(_table(SUMMARY_COLUMNS, summary))
    return EXIT_OK


def cmd_study(args):
    cfg = _config(args)
    out = Path(cfg.out_dir)
    if args.kind == "convergence":
        rows = sim.convergence_study(cfg)
        table = [[r.series, r.stage, r.nodes, r.err_phi, r.err_u] for r in rows]
        header = CONVERGENCE_COLUMNS
    else:
        rows = sim.efficiency_study(cfg)
        table = [[r.eps, r.stage, r.dofs, r.eta_phi, r.err_eps, r.index_robust,
                  r.eta_std, r.err_h1, r.index_standard] for r in rows]
        header = EFFICIENCY_COLUMNS
    sim.write_csv(out / f"{args.kind}.csv", header, table)
    print(_table(header, table))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="phasefrac",
                                description="Adaptive phase-field fracture benchmarks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(q):
        q.add_argument("--preset", choices=sim.PRESETS,
                       help="fill missing keys with published values; desk also shortens the run")
        q.add_argument("--out", help="output directory (overrides out_dir)")

    r = sub.add_parser("run", help="run a benchmark timeline, adaptively if stages > 0")
    r.add_argument("config")
    common(r)
    r.add_argument("--vtk-every", type=int, default=0, metavar="K",
                   help="write VTK every K steps (0: never)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("study", help="convergence or efficiency study")
    s.add_argument("kind", choices=("convergence", "efficiency"))
    s.add_argument("config")
    common(s)
    s.set_defaults(func=cmd_study)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "vtk_every", 0) < 0:
        parser.error("--vtk-every must be non-negative")
    try:
        return args.func(args)
    except (sim.ConfigError, MeshError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except SolverError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
