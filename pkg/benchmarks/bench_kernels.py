"""Compare the compiled and pure-Python trilinear kernels.

Usage: python benchmarks/bench_kernels.py [--rotations 512] [--repeat 3]

Times slicing and merging on the desk-scale problem (64^2 detector, 64^3
volume) with each available backend and checks that both agree.
"""

import argparse
import time

import numpy as np

from fxi import kernels
from fxi.geometry import DetectorGeometry, build_rotation_grid, pixel_qvox, volume_q_step


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rotations", type=int, default=512)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    geom = DetectorGeometry.pnccd_1024().binned(16)
    n_vol = 64
    qvox = pixel_qvox(geom, volume_q_step(geom, n_vol)).reshape(-1, 3)
    center = np.full(3, n_vol // 2, dtype=float)
    grid = build_rotation_grid(4)
    rots = grid.matrices[: args.rotations]
    rng = np.random.default_rng(0)
    vol = rng.random((n_vol,) * 3)
    vals = rng.random((len(rots), len(qvox)))
    wts = np.ones(len(rots))
    mask = np.ones(len(qvox), dtype=bool)

    results = {}
    for name in kernels.available_backends():
        prev = kernels.use_backend(name)
        try:
            t_slice, (s, _) = _best(lambda: kernels.slice_volume(vol, rots, qvox, center),
                                    args.repeat)

            def merge():
                acc = np.zeros((n_vol,) * 3)
                wt = np.zeros((n_vol,) * 3)
                kernels.merge_slices(acc, wt, rots, qvox, center, vals, wts, mask)
                return acc

            t_merge, acc = _best(merge, args.repeat)
        finally:
            kernels.use_backend(prev)
        results[name] = (t_slice, t_merge, s, acc)
        print(f"{name:>7}: slice {t_slice * 1e3:8.1f} ms   merge {t_merge * 1e3:8.1f} ms   "
              f"({len(rots)} rotations x {len(qvox)} pixels)")

    if len(results) == 2:
        c, p = results["cython"], results["python"]
        print(f"speedup: slice x{p[0] / c[0]:.1f}   merge x{p[1] / c[1]:.1f}")
        print(f"max |diff|: slice {np.abs(c[2] - p[2]).max():.2e}   "
              f"merge {np.abs(c[3] - p[3]).max():.2e}")


if __name__ == "__main__":
    main()
