"""Median wall time of one SG-VB sweep against the array size.

Fits t = a N^2 + b N (no intercept) and also t = c + b N for comparison; the
constant term captures per-update interpreter overhead.
"""
import argparse
import time

import numpy as np
from threadpoolctl import threadpool_limits

from nf_sgvb import sgvb
from nf_sgvb.channel import ArrayGeometry, SceneConfig, add_noise, generate_scene, synthesize_channel


def sweep_time(n, l_paths, repeats, seed=0):
    geom = ArrayGeometry.ula(n)
    rng = np.random.default_rng(seed)
    scene = generate_scene(geom, SceneConfig(l_paths=l_paths), rng)
    y, _ = add_noise(synthesize_channel(geom, scene, "fresnel"), 100.0, l_paths, rng)
    state = sgvb.initialize(y, geom, sgvb.SgvbConfig(l_paths=l_paths))
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        sgvb.sweep(state)
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


def r_squared(X, t):
    coef = np.linalg.lstsq(X, t, rcond=None)[0]
    pred = X @ coef
    return coef, 1 - np.sum((t - pred) ** 2) / np.sum((t - t.mean()) ** 2)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256, 512, 1024, 2048])
    ap.add_argument("--paths", type=int, default=6)
    ap.add_argument("--repeats", type=int, default=30)
    args = ap.parse_args()
    sizes = np.array(args.sizes, dtype=float)
    with threadpool_limits(1):
        t = np.array([sweep_time(int(n), args.paths, args.repeats) for n in sizes])
    for n, v in zip(sizes, t):
        print(f"N={int(n):5d}  {v * 1e3:8.3f} ms per sweep")
    coef, r2 = r_squared(np.column_stack([sizes**2, sizes]), t)
    print(f"t = a N^2 + b N:  a={coef[0]:.3e} b={coef[1]:.3e}  R^2={r2:.3f}")
    coef, r2 = r_squared(np.column_stack([np.ones_like(sizes), sizes]), t)
    print(f"t = c + b N:      c={coef[0]:.3e} b={coef[1]:.3e}  R^2={r2:.3f}")


if __name__ == "__main__":
    main()
