"""Benchmark the ray-marching kernel: numba @njit vs pure-numpy fallback.

Run: python bench/bench_rayvox.py [--dim 192] [--radius 24] [--repeats 3]

Both paths are called directly so one process can compare them
regardless of the VICT_PURE_NUMPY flag. The first numba call includes
JIT compilation and is reported separately.
"""

import argparse
import time

import numpy as np

from vict import PhantomSpec, Shape
from vict import accel
from vict.phantom import make_recon
from vict.rayvox import _trace_numpy, camera_point


def build_case(dim, radius):
    spec = PhantomSpec(
        dims=(dim, dim, dim),
        cavities=(),
        resections=((Shape("sphere", (dim / 2.0,) * 3, (radius,) * 3),),),
    )
    mesh, camera, _, _ = make_recon(spec, 1)
    return spec.geometry, mesh, camera_point(camera)


def time_call(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--dim", type=int, default=192, help="grid size per axis")
    parser.add_argument("--radius", type=int, default=24, help="cavity radius in mm")
    parser.add_argument("--step", type=float, default=0.5, help="ray sample spacing in mm")
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    geom, mesh, cam = build_case(args.dim, args.radius)
    verts = np.ascontiguousarray(mesh.vertices)
    samples = int(np.sum(np.linalg.norm(verts - cam, axis=1) / args.step)) + 2 * len(verts)
    print(f"grid {args.dim}^3, {len(verts)} vertices, ~{samples / 1e6:.1f}M ray samples")

    def run_numpy():
        grid = np.zeros(tuple(geom.dims), dtype=np.uint8)
        _trace_numpy(verts, cam, geom.origin, geom.direction, geom.spacing, args.step, grid)
        return grid

    t_numpy = time_call(run_numpy, args.repeats)
    print(f"numpy fallback:      {t_numpy * 1e3:9.1f} ms")

    if not accel.HAVE_NUMBA:
        print("numba not installed; nothing to compare")
        return

    from vict.rayvox import _trace_kernel

    def run_numba():
        grid = np.zeros(tuple(geom.dims), dtype=np.uint8)
        _trace_kernel(verts, cam, geom.origin, geom.direction, geom.spacing, args.step, grid)
        return grid

    t0 = time.perf_counter()
    out_numba = run_numba()
    t_first = time.perf_counter() - t0
    print(f"numba first call:    {t_first * 1e3:9.1f} ms (includes JIT compile)")
    t_numba = time_call(run_numba, args.repeats)
    print(f"numba warm:          {t_numba * 1e3:9.1f} ms")
    print(f"speedup (warm):      {t_numpy / t_numba:9.2f}x")

    if not np.array_equal(out_numba, run_numpy()):
        raise SystemExit("paths disagree: kernels are out of sync")
    print("outputs identical: yes")


if __name__ == "__main__":
    main()
