"""Timing comparison of the numba kernels against their numpy twins.

Runs each hot kernel on a mid-size problem, checks that both paths
agree to rounding, and prints per-kernel medians with speedups.  The
active package backend (what `import twopressure` would pick up, which
the TWOPRESSURE_NUMBA env flag controls) is reported in the header;
the comparison itself always times both twins directly.

Usage: python3 benchmarks/bench_kernels.py [--n 128] [--repeats 3]
"""

import argparse
import time

import numpy as np

from twopressure import _kernels as K
from twopressure._accel import HAVE_NUMBA, backend
from twopressure.mesh import build_uniform
from twopressure.quadrature import simplex_rule


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def agree(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(1.0, np.abs(a).max())
    return np.abs(a - b).max() / scale


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=128,
                    help="macro subdivisions per axis (cells = 2 n^2)")
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--locate-pts", type=int, default=2000,
                    help="points for the locate kernel (its numpy twin "
                         "scans all cells, so this dominates the runtime)")
    args = ap.parse_args()

    mesh = build_uniform([(0, 1), (0, 1)], args.n)
    verts = np.ascontiguousarray(mesh.vertices)
    cells = np.ascontiguousarray(mesh.cells.astype(np.int64))
    rng = np.random.default_rng(0)
    u = rng.standard_normal(mesh.n_vertices)
    measures, grads = K._tri_geometry_np(verts, cells)
    basis, _ = simplex_rule(2, 2)
    pts = rng.uniform(0.02, 0.98, (args.locate_pts, 2))

    cases = [
        ("tri_geometry", K._tri_geometry_np, K._tri_geometry_nb,
         (verts, cells), lambda r: r[1]),
        ("stiffness_values", K._stiffness_values_np, K._stiffness_values_nb,
         (grads, measures, 2.0), None),
        ("mass_values", K._mass_values_np, K._mass_values_nb,
         (measures, 3), None),
        ("cell_gradients", K._cell_gradients_np, K._cell_gradients_nb,
         (cells, grads, u), None),
        ("eval_p1", K._eval_p1_np, K._eval_p1_nb,
         (cells, u, basis), None),
        ("locate", K._locate_np, K._locate_nb,
         (verts, cells, pts, 1e-12), lambda r: r[1]),
    ]

    print("backend selected by package: %s (numba importable: %s)"
          % (backend(), HAVE_NUMBA))
    print("mesh: %d cells, %d vertices, %d located points"
          % (mesh.n_cells, mesh.n_vertices, len(pts)))
    print("%-18s %12s %12s %9s %10s"
          % ("kernel", "numpy [ms]", "numba [ms]", "speedup", "agreement"))
    for name, f_np, f_nb, arg, pick in cases:
        f_nb(*arg)  # compile outside the timed region
        t_np = best_of(lambda: f_np(*arg), args.repeats)
        t_nb = best_of(lambda: f_nb(*arg), args.repeats)
        r_np, r_nb = f_np(*arg), f_nb(*arg)
        if pick is not None:
            r_np, r_nb = pick(r_np), pick(r_nb)
        print("%-18s %12.3f %12.3f %8.1fx %10.1e"
              % (name, 1e3 * t_np, 1e3 * t_nb, t_np / t_nb,
                 agree(r_np, r_nb)))
    if not HAVE_NUMBA:
        print("note: numba unavailable or disabled; the 'numba' column "
              "is the same python loop uncompiled")


if __name__ == "__main__":
    main()
