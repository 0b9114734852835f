"""Time the voxel-walk kernel on both backends and on a full-frame integration.

    python3 benchmarks/bench_kernels.py [--rays 20000] [--repeat 5]
"""
import argparse
import time

import numpy as np

from semistatic import kernels
from semistatic import tsdf as ts


def _cloud(n, rng):
    # points on a wall 2-4 m ahead of a camera at the origin, like one depth frame
    pts = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-1, 1, n), rng.uniform(2, 4, n)])
    return pts + rng.normal(0, 0.01, pts.shape)


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rays", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--voxel", type=float, default=0.05)
    ap.add_argument("--trunc", type=float, default=0.2)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    pts = _cloud(args.rays, rng)
    org = np.zeros((1, 3))
    results = {}
    for name in kernels.available_backends():
        kernels.set_backend(name)
        walk = _best(lambda: kernels.band_walk(pts, org, args.voxel, args.trunc), args.repeat)
        fuse = _best(lambda: ts.integrate_cloud(ts.TsdfGrid(args.voxel, args.trunc), pts), args.repeat)
        results[name] = (walk, fuse)

    n_samples = len(kernels.band_walk(pts, org, args.voxel, args.trunc)[1])
    print(f"{args.rays} rays, {n_samples} voxel samples, best of {args.repeat}")
    print(f"{'backend':<10}{'walk ms':>10}{'Msamples/s':>12}{'fuse ms':>10}")
    for name, (walk, fuse) in results.items():
        print(f"{name:<10}{walk * 1e3:>10.2f}{n_samples / walk / 1e6:>12.2f}{fuse * 1e3:>10.2f}")
    if "cython" in results:
        py, cy = results["python"][0], results["cython"][0]
        print(f"walk speedup cython/python: {py / cy:.1f}x")
    if len(results) > 1:
        outs = []
        for name in results:
            kernels.set_backend(name)
            outs.append(kernels.band_walk(pts, org, args.voxel, args.trunc))
        same = all(np.array_equal(a, b) for a, b in zip(outs[0], outs[1]))
        print(f"backends bit-identical: {same}")


if __name__ == "__main__":
    main()
