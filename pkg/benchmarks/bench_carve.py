"""Time the numba and numpy carve kernels on the same sweep and check they agree.

    python3 benchmarks/bench_carve.py [--scenario u_shape] [--h 0.5] [--repeat 3]

The numba kernel is compiled (or loaded from cache) before timing.
"""
from __future__ import annotations

import argparse
import statistics
import time
from importlib import resources
from pathlib import Path

import numpy as np

from ctsdr.planning import integrate_plan
from ctsdr.scenario import load_scenario
from ctsdr.voxel import VoxelGrid, carve_poses


def time_backend(sc, tips, tangents, h, use_numba, workers, repeat):
    times, mask = [], None
    for _ in range(repeat):
        grid = VoxelGrid(sc.block, h)
        start = time.perf_counter()
        carve_poses(grid, tips, tangents, sc.tool, workers, use_numba)
        times.append(time.perf_counter() - start)
        mask = grid.removed
    return min(times), statistics.median(times), mask


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--scenario", default="u_shape",
                        help="bundled scenario name or path to a scenario file")
    parser.add_argument("--h", type=float, default=None, help="voxel size (default: scenario's)")
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--workers", type=int, nargs="+", default=[1, 4])
    parser.add_argument("--skip-numpy", action="store_true", help="time only the numba kernel")
    args = parser.parse_args(argv)

    path = Path(args.scenario)
    if not path.exists():
        path = Path(str(resources.files("ctsdr") / "scenarios" / f"{args.scenario}.yaml"))
    sc = load_scenario(path)
    h = args.h or sc.h_mm
    tips, tangents = integrate_plan(sc.build_plan(), sc.dt_s).tip_poses()

    # warm-up compiles the numba kernel
    carve_poses(VoxelGrid(sc.block, 4.0), tips[:10], tangents[:10], sc.tool, 1, True)

    print(f"scenario {sc.name}: {len(tips)} poses, h={h} mm, grid {VoxelGrid(sc.block, h).dims}")
    print(f"{'backend':<8} {'workers':>7} {'best s':>9} {'median s':>9}")
    masks = {}
    backends = [True] if args.skip_numpy else [True, False]
    for use_numba in backends:
        name = "numba" if use_numba else "numpy"
        for workers in args.workers:
            best, med, mask = time_backend(sc, tips, tangents, h, use_numba, workers, args.repeat)
            masks[(name, workers)] = mask
            print(f"{name:<8} {workers:>7} {best:>9.3f} {med:>9.3f}")
    ref = next(iter(masks.values()))
    same = all(np.array_equal(m, ref) for m in masks.values())
    print(f"masks identical across runs: {same} ({int(ref.sum())} voxels removed)")
    return 0 if same else 1


if __name__ == "__main__":
    raise SystemExit(main())
