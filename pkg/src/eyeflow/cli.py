"""Command-line entry point: ``eyeflow solve|mesh|verify``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

from .coupled import POSTURES
from .exceptions import EyeflowError


def _solve(args):
    from .scenario import metrics_text, read_config, run_scenario

    cfg = read_config(args.config)
    out = run_scenario(cfg, posture=args.posture, mesh=args.mesh, out_dir=args.out,
                       dump_matrices=args.dump_matrices, threads=args.threads)
    sys.stdout.write(metrics_text(out))
    return 0 if out.converged else 2


def _mesh(args):
    from .mesh import write_gmsh_msh
    from .scenario import build_mesh, read_config

    cfg = read_config(args.config)
    mesh = build_mesh(cfg)
    with open(args.out, "w") as fh:
        fh.write(write_gmsh_msh(mesh))
    print(f"wrote {mesh.n_cells} cells, {mesh.n_vertices} vertices to {args.out}")
    return 0


def _write_rows(path, rows, keys):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([r.get(k, "") for k in keys])


def _verify(args):
    from . import verification as v

    os.makedirs(args.out, exist_ok=True)
    if args.suite in ("mms", "all"):
        rows = v.run_mms()
        keys = ["n", "h", "u", "p", "T", "order_u", "order_p", "order_T", "newton"]
        print("MMS convergence (L2 errors, observed orders)")
        print(v.format_table(rows, keys))
        _write_rows(os.path.join(args.out, "verify_mms.csv"), rows, keys)
    if args.suite in ("cavity", "all"):
        res = v.run_cavity_benchmark()
        keys = ["n", "nu_hot", "nu_cold", "newton", "max_u"]
        print("Differentially heated cavity, Ra = 1e3, Pr = 0.71")
        print(v.format_table(res["rows"], keys))
        print(f"Richardson extrapolated Nu = {res['extrapolated']:.6f} (order {res['order']:.2f}); "
              f"classical value ~ {res['reference']}")
        _write_rows(os.path.join(args.out, "verify_cavity.csv"), res["rows"], keys)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="eyeflow", description="Aqueous humor flow and heat transfer in the eye")
    ap.add_argument("-v", "--verbose", action="store_true", help="log Newton iterations")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="run one scenario")
    s.add_argument("--config", required=True)
    s.add_argument("--posture", choices=POSTURES)
    s.add_argument("--mesh", help="Gmsh MSH 4.1 file overriding the parametric geometry")
    s.add_argument("--out", help="output directory (default from config)")
    s.add_argument("--dump-matrices", action="store_true", help="write the final Jacobian in Matrix Market format")
    s.add_argument("--threads", type=int, help="assembly threads")
    s.set_defaults(func=_solve)

    m = sub.add_parser("mesh", help="write the generated eye mesh")
    m.add_argument("--config", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=_mesh)

    v = sub.add_parser("verify", help="run verification suites")
    v.add_argument("--suite", choices=("mms", "cavity", "all"), default="all")
    v.add_argument("--out", default=".", help="directory for the CSV tables")
    v.set_defaults(func=_verify)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (EyeflowError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
