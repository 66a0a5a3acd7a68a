"""Time brute-force against indexed rope splitting over a range of skeleton sizes."""

import argparse
import time

import numpy as np

from ropedyn.split import ACCELERATED, BRUTE, split_rope


def wavy_skeleton(n, amplitude=150.0, width=900.0):
    t = np.linspace(0, 1, n)
    x, y = width * t, amplitude * np.sin(4 * np.pi * t)
    arc = np.r_[0, np.cumsum(np.hypot(np.diff(x), np.diff(y)))]
    u = np.linspace(0, arc[-1], n)
    return np.c_[np.interp(u, arc, x), np.interp(u, arc, y)]


def best_time(pts, d_min, mode, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        res = split_rope(pts, d_min, mode)
        best = min(best, time.perf_counter() - t0)
    return best, res


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", default="300,1000,3300,10000")
    ap.add_argument("--d-min", type=float, default=15.0)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    print(f"{'points':>8}{'nodes':>7}{'brute [ms]':>12}{'indexed [ms]':>14}{'speedup':>9}")
    for n in (int(s) for s in args.sizes.split(",")):
        pts = wavy_skeleton(n)
        tb, a = best_time(pts, args.d_min, BRUTE, args.repeats)
        ta, b = best_time(pts, args.d_min, ACCELERATED, args.repeats)
        assert a.indices == b.indices
        print(f"{n:>8}{len(a.indices):>7}{tb * 1e3:>12.1f}{ta * 1e3:>14.2f}{tb / ta:>9.1f}")


if __name__ == "__main__":
    main()
