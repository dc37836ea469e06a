"""Command-line entry points: generate-mesh, run, compare, db-inspect.

Exit codes: 0 success, 2 validation error, 3 simulation divergence,
4 I/O integrity error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import io, meshgen, multiscale
from .errors import (ConfigError, DivergenceError, Fe2RomError, IntegrityError,
                     MeshError, SimulationBlowUpError)

logger = logging.getLogger("fe2rom")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3
EXIT_INTEGRITY = 4


def cmd_generate_mesh(args):
    spec = json.loads(Path(args.config).read_text())
    mesh, materials = meshgen.generate_from_spec(spec)
    out = Path(args.out or "mesh.json")
    io.write_mesh(out, mesh, materials)
    print(f"wrote {out}: {mesh.n_nodes} nodes, {mesh.n_elements} elements, "
          f"{len(mesh.constrained_nodes)} constrained nodes")
    return EXIT_OK


def cmd_run(args):
    cfg = io.load_config(args.config)
    out = Path(args.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    io.write_manifest(out, cfg, {"config": args.config,
                                 "macro_mesh": cfg["macro_mesh"],
                                 "rve_mesh": cfg["rve_mesh"]})
    macro_mesh, macro_materials = io.read_mesh(cfg["macro_mesh"])
    rve_mesh, rve_materials = io.read_mesh(cfg["rve_mesh"])
    sim = multiscale.SimulationConfig.from_dict(cfg)
    result = multiscale.central_difference_run(sim, macro_mesh,
                                               macro_materials, rve_mesh,
                                               rve_materials)
    io.write_history_csv(out / "history.csv", result.history)
    summary = {
        "mode": sim.micro_mode,
        "steps": result.steps,
        "wall_time_s": result.wall_time,
        "counters": result.counters.to_dict(),
    }
    if result.db is not None:
        summary["database"] = {
            "entries": len(result.db.entries),
            "total_samples": result.db.total_samples,
            "stats": result.db.stats.to_dict(),
        }
        io.save_database(result.db, out / "db")
    if cfg.get("reference_history"):
        ref = io.read_history_csv(cfg["reference_history"])
        summary["e_rel_percent"] = multiscale.error_report(ref, result.history,
                                                           sim.ds)
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(f"run complete: {result.steps} steps in {result.wall_time:.1f}s, "
          f"outputs in {out}")
    return EXIT_OK


def cmd_compare(args):
    ref = io.read_history_csv(args.reference)
    test = io.read_history_csv(args.test)
    ds = args.ds if args.ds is not None else float(ref.times[1] - ref.times[0])
    if not ref.same_grid(test):
        raise ConfigError("history files sample different time grids")
    report = multiscale.error_report(ref, test, ds)
    for key in ("y-displacement", "z-displacement", "y-velocity", "z-velocity",
                "x-displacement", "x-velocity"):
        val = report[key]
        shown = "undefined (zero reference)" if val is None else f"{val:.4g} %"
        print(f"{key:>16}: {shown}")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1))
    return EXIT_OK


def cmd_db_inspect(args):
    report = io.inspect_database(args.db)
    print(f"{'id':>4} {'m':>5} {'s':>4} {'gen':>4}  lineage")
    for row in report["entries"]:
        print(f"{row['id']:>4} {row['m']:>5} {row['s']:>4} "
              f"{row['generation']:>4}  {row['lineage']}")
    print(f"total samples: {report['total_samples']} "
          f"(conserved: {report['sample_conservation']})")
    print(f"capacity ok: {report['capacity_ok']}")
    if "reduced_mesh_elements" in report:
        print(f"reduced mesh elements: {report['reduced_mesh_elements']}")
    if not (report["sample_conservation"] and report["capacity_ok"]):
        raise IntegrityError("database invariants violated", path=args.db)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="fe2rom",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-mesh", help="write a mesh JSON from a "
                       "geometry description")
    p.add_argument("--config", required=True, help="geometry description JSON")
    p.add_argument("--out", help="output mesh path")
    p.set_defaults(func=cmd_generate_mesh)

    p = sub.add_parser("run", help="execute a two-scale simulation")
    p.add_argument("--config", required=True, help="run configuration JSON")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, default=None,
                   help="worker count override (serial reference build)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="relative global errors between two "
                       "history CSVs")
    p.add_argument("reference")
    p.add_argument("test")
    p.add_argument("--ds", type=float, default=None)
    p.add_argument("--out", help="write the error report JSON here")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("db-inspect", help="report and integrity-check a "
                       "database directory")
    p.add_argument("db")
    p.set_defaults(func=cmd_db_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, MeshError) as exc:
        logger.error("validation error: %s", exc)
        return EXIT_VALIDATION
    except (DivergenceError, SimulationBlowUpError) as exc:
        logger.error("simulation failed: %s", exc)
        return EXIT_DIVERGENCE
    except IntegrityError as exc:
        logger.error("integrity error: %s", exc)
        return EXIT_INTEGRITY
    except Fe2RomError as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
