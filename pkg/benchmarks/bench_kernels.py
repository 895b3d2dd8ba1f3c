#!/usr/bin/env python3
"""Benchmark the compiled GMM kernel against the numpy fallback.

Times the fused E-step (`accumulate_stats`) and the scoring kernel
(`frame_loglik`) at the shapes the pipeline actually hits: 44-dim CI
features, mixture counts from the experiment sweeps.

Usage: python benchmarks/bench_kernels.py [--frames N] [--csv out.csv]
"""

import argparse
import time

import numpy as np

from cisid.kernels import _numpy_backend

try:
    from cisid.kernels import _gmm_ext
except ImportError:
    _gmm_ext = None


def _problem(rng, t, k, d):
    x = rng.standard_normal((t, d)).astype(np.float32)
    w = rng.dirichlet(np.ones(k))
    mu = rng.standard_normal((k, d))
    var = rng.uniform(0.5, 2.0, (k, d))
    log_norm = -0.5 * (d * np.log(2 * np.pi) + np.log(var).sum(axis=1))
    return x, (np.log(w), mu, 1.0 / var, log_norm)


def _time(fn, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--frames", type=int, default=200_000)
    parser.add_argument("--dim", type=int, default=44)
    parser.add_argument("--threads", type=int, default=2,
                        help="thread count for the compiled lane's second column")
    parser.add_argument("--csv", help="also write results as CSV")
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    rows = []
    print(f"frames={args.frames} dim={args.dim}")
    header = (f"{'kernel':<18}{'K':>5}  {'numpy':>9}  {'cython(1)':>10}  "
              f"{'cython(%d)' % args.threads:>10}  {'best speedup':>13}")
    print(header)
    print("-" * len(header))
    for k in (8, 32, 64, 128, 512):
        x, params = _problem(rng, args.frames, k, args.dim)
        for name, np_fn, ext_fn in (
            ("accumulate_stats",
             lambda: _numpy_backend.accumulate_stats(x, *params, want_s=True),
             lambda nt: _gmm_ext.accumulate_stats(x, *params, want_s=True,
                                                  num_threads=nt)),
            ("frame_loglik",
             lambda: _numpy_backend.frame_loglik(x, *params),
             lambda nt: _gmm_ext.frame_loglik(x, *params, num_threads=nt)),
        ):
            t_np = _time(np_fn)
            if _gmm_ext is None:
                print(f"{name:<18}{k:>5}  {t_np:>8.3f}s  {'n/a':>10}  {'n/a':>10}")
                rows.append((name, k, t_np, None, None))
                continue
            t_c1 = _time(lambda: ext_fn(1))
            t_cn = _time(lambda: ext_fn(args.threads))
            speedup = t_np / min(t_c1, t_cn)
            print(f"{name:<18}{k:>5}  {t_np:>8.3f}s  {t_c1:>9.3f}s  "
                  f"{t_cn:>9.3f}s  {speedup:>12.2f}x")
            rows.append((name, k, t_np, t_c1, t_cn))
    if _gmm_ext is None:
        print("\ncompiled kernel not built; only the numpy lane was timed")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("kernel,K,numpy_s,cython1_s,cythonN_s\n")
            for row in rows:
                fh.write(",".join("" if v is None else str(v) for v in row) + "\n")
        print(f"wrote {args.csv}")


if __name__ == "__main__":
    main()
