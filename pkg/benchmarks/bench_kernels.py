"""Compiled versus pure-Python point-location kernels.

Times ``locate_points`` (background-grid search plus quadratic-map
inversion) and ``invert_points`` (Newton inversion for known cells) on a
micro-strip mesh, checks that both backends agree and prints the speed-up.

    python benchmarks/bench_kernels.py [--eps 1/8] [--points 200000] [--repeat 3]
"""
from __future__ import annotations

import argparse
import time
from fractions import Fraction

import numpy as np

from porohomog import femcore as fc
from porohomog import kernels
from porohomog.geometry import PRESET_SHAPES
from porohomog.mesh import MeshParams
from porohomog.microsolver import MicroCase, micro_mesh


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--eps", default="1/8")
    ap.add_argument("--points", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=12345)
    args = ap.parse_args(argv)
    if kernels.compiled_impl is None:
        raise SystemExit("compiled kernels not built; run `pip install -e . --no-build-isolation` first")

    eps = float(Fraction(args.eps))
    mesh = micro_mesh(MicroCase(PRESET_SHAPES["ellipse"], eps, params=MeshParams(16, 2.0)))
    loc = fc.locator(mesh)
    rng = np.random.default_rng(args.seed)
    # random quadrature-like points inside random cells, so every point is locatable
    cells = rng.integers(0, mesh.n_cells, args.points)
    bary = rng.dirichlet([1.0, 1.0, 1.0], args.points)
    refs = bary[:, 1:]
    pts = np.einsum("ni,nic->nc", fc.ref.shape_values(2, refs), mesh.cell_nodes(cells))
    nodes = np.ascontiguousarray(mesh.cell_nodes(cells))
    print(f"mesh: {mesh.n_cells} cells, {args.points} points, eps = {args.eps}")

    rows = []
    for name, impl in (("python", kernels.python_impl), ("compiled", kernels.compiled_impl)):
        t_loc, (c_out, r_out) = best_of(lambda: impl.locate_points(loc.nodes, loc.bin_ptr, loc.bin_cells, loc.origin,
                                                                   loc.inv_size, loc.shape, pts, 1e-9), args.repeat)
        t_inv, (r_inv, conv) = best_of(lambda: impl.invert_points(nodes, pts), args.repeat)
        rows.append((name, t_loc, t_inv, c_out, r_out, r_inv, conv))
        print(f"{name:9s} locate_points {t_loc:8.4f} s   invert_points {t_inv:8.4f} s")

    (_, tl_py, ti_py, c_py, r_py, ri_py, cv_py), (_, tl_c, ti_c, c_c, r_c, ri_c, cv_c) = rows
    assert np.all(c_py >= 0) and np.all(c_c >= 0), "unlocated points"
    x_py = np.einsum("ni,nic->nc", fc.ref.shape_values(2, r_py), mesh.cell_nodes(c_py))
    x_c = np.einsum("ni,nic->nc", fc.ref.shape_values(2, r_c), mesh.cell_nodes(c_c))
    print(f"agreement: same cell for {np.mean(c_py == c_c):.4%} of points, "
          f"max image difference {np.abs(x_py - x_c).max():.2e}, "
          f"max inversion difference {np.abs(ri_py - ri_c).max():.2e}")
    print(f"speed-up: locate {tl_py / tl_c:6.1f}x   invert {ti_py / ti_c:6.1f}x")


if __name__ == "__main__":
    main()
