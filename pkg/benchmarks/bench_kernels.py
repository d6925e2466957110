"""Time every hot kernel on its numba and numpy paths.

    python benchmarks/bench_kernels.py [--repeat 3] [--quick]

The numba column excludes compilation (one warm-up call runs first).  The
env flag VOXCRF_DISABLE_NUMBA only changes the default path; both paths are
timed here regardless.
"""
import argparse
import time

import numpy as np

from voxcrf._accel import NUMBA_AVAILABLE
from voxcrf.kernels import (PermutohedralLattice, bruteforce_filter, conv3d_backward,
                            conv3d_forward, gather, maxpool3d_forward, scatter)


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng, quick):
    n = 20 if quick else 32
    occ = (rng.random((16, n, n, n)) < 0.1).astype(np.float64)
    x = occ * rng.normal(size=occ.shape)
    w = rng.normal(size=(32, 16, 3, 3, 3))
    b = np.zeros(32)
    _, xp = conv3d_forward(x, w, b, 1, 1, use_numba=False)
    g = rng.normal(size=(32, n, n, n))

    npts = 20_000 if quick else 100_000
    idx = rng.integers(0, 8000, size=(npts, 8))
    wt = rng.random((npts, 8))
    table = rng.normal(size=(8000, 5))
    vals = rng.normal(size=(npts, 5))

    pos = rng.random((2000, 3)) * np.array([1.2, 1.2, 1.0])
    feats = np.hstack([pos / 0.8, rng.random((2000, 3)) * 255 / 11])
    q = rng.random((2000, 5))

    return [
        ("conv3d forward", lambda nb: conv3d_forward(x, w, b, 1, 1, use_numba=nb)),
        ("conv3d backward", lambda nb: conv3d_backward(g, xp, w, 1, 1, use_numba=nb)),
        ("maxpool3d forward", lambda nb: maxpool3d_forward(x, 2, use_numba=nb)),
        ("gather (interpolate)", lambda nb: gather(idx, wt, table, use_numba=nb)),
        ("scatter (splat)", lambda nb: scatter(idx, wt, vals, 8000, use_numba=nb)),
        ("bruteforce gauss 2000x6d", lambda nb: bruteforce_filter(feats, q, use_numba=nb)),
        ("lattice build+filter 2000x6d",
         lambda nb: PermutohedralLattice(feats, use_numba=nb).filter(q)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--quick", action="store_true", help="smaller inputs")
    args = ap.parse_args(argv)
    if not NUMBA_AVAILABLE:
        raise SystemExit("numba is not importable")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<30} {'numpy s':>10} {'numba s':>10} {'speedup':>8}")
    for name, fn in cases(rng, args.quick):
        fn(True)  # compile
        t_np = best_of(lambda: fn(False), args.repeat)
        t_nb = best_of(lambda: fn(True), args.repeat)
        print(f"{name:<30} {t_np:>10.4f} {t_nb:>10.4f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
