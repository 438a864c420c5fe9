"""Command-line entry point: ``ctsdr run|check|forces|mesh``.

Exit codes: 0 success, 2 validation error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import forces
from .forces import ForceFileError
from .kinematics import KinematicsError
from .planning import PlanError
from .scenario import ScenarioError, load_scenario, run_scenario
from .voxel import export_cavity_mesh, read_mask

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3
VALIDATION_ERRORS = (ScenarioError, ForceFileError, PlanError, KinematicsError)


def _fail(exc: BaseException, code: int) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    line = getattr(exc, "line", None)
    if line is not None:
        payload["line"] = line
    print(json.dumps(payload), file=sys.stderr)
    return code


def analyze_forces_cmd(path, span: int = 100, out_dir=None) -> dict:
    """Smooth a force CSV; writes ``<stem>_smoothed.csv`` and ``<stem>_summary.json``."""
    path = Path(path)
    series = forces.read_force_csv(path)
    summary = forces.force_summary(series, span)
    out = Path(out_dir) if out_dir is not None else path.parent
    out.mkdir(parents=True, exist_ok=True)
    forces.write_force_csv(out / f"{path.stem}_smoothed.csv", forces.smooth_forces(series, span))
    (out / f"{path.stem}_summary.json").write_text(json.dumps(summary, indent=2) + "\n",
                                                   encoding="utf-8")
    return summary


def _cmd_run(args) -> int:
    sc = load_scenario(args.scenario)
    paths = run_scenario(sc, args.out, workers=args.workers)
    report = json.loads(paths["report.json"].read_text(encoding="utf-8"))
    cav = report["cavity"]
    print(f"{sc.name}: {report['carve']['removed_count']} voxels removed, "
          f"reach {cav['max_lateral_reach_mm']:.2f} mm, "
          f"tip angle {cav['tip_angle_change_deg']:.2f} deg -> {paths['report.json'].parent}")
    return EXIT_OK


def _cmd_check(args) -> int:
    sc = load_scenario(args.scenario)
    plan = sc.build_plan()
    print(f"{sc.name}: ok ({sc.plan_type}, {len(plan.segments)} segments, "
          f"{plan.duration_s:.6g} s)")
    for item in sc.defaulted:
        print(f"  default {item}")
    return EXIT_OK


def _cmd_forces(args) -> int:
    summary = analyze_forces_cmd(args.csv, args.span, args.out)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _cmd_mesh(args) -> int:
    grid = read_mask(args.mask)
    out = Path(args.output) if args.output else Path(args.mask).with_name(f"cavity.{args.format}")
    verts, tris = export_cavity_mesh(grid, out, args.format, not args.ascii)
    print(f"{out}: {len(verts)} vertices, {len(tris)} triangles")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctsdr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario and write its artifacts")
    p.add_argument("scenario")
    p.add_argument("--out", help="output directory (overrides output.directory)")
    p.add_argument("--workers", type=int, default=None,
                   help="carve worker threads (default: $CTSDR_WORKERS or 1)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("check", help="validate a scenario without running it")
    p.add_argument("scenario")
    p.set_defaults(func=_cmd_check)

    p = sub.add_parser("forces", help="smooth a force CSV and summarise it")
    p.add_argument("csv")
    p.add_argument("--span", type=int, default=100)
    p.add_argument("--out", help="output directory (default: next to the CSV)")
    p.set_defaults(func=_cmd_forces)

    p = sub.add_parser("mesh", help="re-export the cavity surface from a mask.bin")
    p.add_argument("mask")
    p.add_argument("-o", "--output")
    p.add_argument("--format", choices=("ply", "stl"), default="ply")
    p.add_argument("--ascii", action="store_true")
    p.set_defaults(func=_cmd_mesh)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        return _fail(exc, EXIT_VALIDATION)
    except FileNotFoundError as exc:
        return _fail(exc, EXIT_VALIDATION)
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        return _fail(exc, EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
