#!/usr/bin/env python3
"""Readable console run of the three analytic identity checks.

The CSV-producing equivalents live in the ``lnsrlab`` CLI; this script is
for eyeballing the numbers.
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from lnsrlab.rng import stream_rng, substream_rng
from lnsrlab.theory import (
    cross_term_mc,
    fd_jacobian,
    mc_noise_stability,
    random_smooth_map,
    taylor_terms,
)


def quadratic_check(seed: int, instances: int, n: int):
    print(f"-- quadratic maps: MC vs closed form ({instances} instances, "
          f"N={n}) --")
    for i in range(instances):
        rng = substream_rng(seed, "theory", 300 + i)
        j = rng.normal(size=8)
        a = rng.normal(size=(8, 8))
        h = 0.5 * (a + a.T)
        f = lambda x: float(j @ x + 0.5 * x @ h @ x)
        fb = lambda xs: xs @ j + 0.5 * ((xs @ h) * xs).sum(axis=1)
        est, se = mc_noise_stability(f, np.zeros(8), 0.05, n, rng, f_batch=fb)
        t = taylor_terms(j, h, 0.05)
        target = t["r_j"] + t["r_h_exact"]
        z = abs(est - target) / se
        flag = "ok" if z <= 3.0 else "OUTSIDE 3 se"
        print(f"  [{i}] mc={est:.6e}  closed={target:.6e}  z={z:.2f}  {flag}"
              f"  (r_h_paper {t['r_h_paper']:.3e}"
              f" vs r_h_exact {t['r_h_exact']:.3e})")


def sigma_trend_check(seed: int, n: int):
    print(f"-- smooth map: first-order dominance as sigma shrinks (N={n}) --")
    f, fb = random_smooth_map(8, stream_rng(seed, "theory"))
    x = stream_rng(seed, "probe").normal(size=8)
    j = fd_jacobian(f, x)
    base = substream_rng(seed, "theory", 0).normal(size=(n, 8))
    f0 = f(x)
    prev = None
    for sigma in (0.1, 0.05, 0.01):
        mc = float(((fb(x + sigma * base) - f0) ** 2).mean())
        r_j = sigma * sigma * float(j @ j)
        ratio = abs(mc - r_j) / mc
        trend = "" if prev is None else ("  (down)" if ratio < prev else "  (UP)")
        print(f"  sigma={sigma:<5} |mc - r_j|/mc = {ratio:.3e}{trend}")
        prev = ratio

def cross_check(seed: int, pairs: int, n: int):
    print(f"-- gradient/Hessian cross term: mean within noise of zero "
          f"({pairs} pairs, N={n}) --")
    worst = 0.0
    for i in range(pairs):
        rng = substream_rng(seed, "theory", 200 + i)
        j = rng.normal(size=6)
        a = rng.normal(size=(6, 6))
        mean, se = cross_term_mc(j, 0.5 * (a + a.T), 0.05, n, rng)
        worst = max(worst, abs(mean) / se)
    print(f"  worst |mean|/se over {pairs} pairs: {worst:.2f} "
          f"({'ok' if worst <= 3.0 else 'OUTSIDE 3 se'})")


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mc-samples", type=int, default=200_000)
    args = p.parse_args()
    quadratic_check(args.seed, instances=10, n=args.mc_samples)
    sigma_trend_check(max(args.seed, 1), n=args.mc_samples)
    cross_check(args.seed, pairs=20, n=args.mc_samples // 2)


if __name__ == "__main__":
    main()
