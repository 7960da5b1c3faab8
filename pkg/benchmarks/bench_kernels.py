"""
Kernel benchmark: numba vs pure numpy
=====================================

Times the two hot loops under both backends on identical inputs and checks
that the outputs agree:

* exact clutter posterior enumeration (2^N branches)
* elliptical slice sampling for the GP probit posterior (N=15)

Usage: python benchmarks/bench_kernels.py [--repeats R] [--quick]
"""

import argparse
import time

import numpy as np

from lossep import kernels
from lossep._accel import HAVE_NUMBA
from lossep.clutter import ClutterParams, simulate_clutter
from lossep.experiments import SweepConfig, simulate_dataset
from lossep.gpc import kernel_matrix
from lossep.oracle import ESSConfig, draw_streams


def best_of(fn, repeats):
    times = []
    out = None
    for _ in range(repeats):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def bench_enumeration(sizes, repeats):
    p = ClutterParams()
    rows = []
    for n in sizes:
        y = simulate_clutter(np.random.default_rng(n), n, 2.0, p)
        t_np, r_np = best_of(lambda: kernels.clutter_enumerate(y, p.pi, p.v_c, p.v_0, "numpy"), repeats)
        t_nb, r_nb = best_of(lambda: kernels.clutter_enumerate(y, p.pi, p.v_c, p.v_0, "numba"), repeats)
        err = max(float(np.max(np.abs(a - b))) for a, b in zip(r_np, r_nb))
        rows.append((f"enumerate N={n}", t_np, t_nb, err))
    return rows


def bench_ess(lengths, repeats):
    cfg = SweepConfig()
    data = simulate_dataset(0, cfg)
    L = np.linalg.cholesky(kernel_matrix(data.X, cfg.kernel))
    rows = []
    for T in lengths:
        streams = draw_streams(ESSConfig(n_samples=T, n_burnin=0, seed=1), L)
        f0 = np.zeros(data.n)
        t_np, c_np = best_of(lambda: kernels.ess_probit_chain(data.y, f0, *streams, backend="numpy"), repeats)
        t_nb, c_nb = best_of(lambda: kernels.ess_probit_chain(data.y, f0, *streams, backend="numba"), repeats)
        rows.append((f"ESS T={T} N={data.n}", t_np, t_nb, float(np.max(np.abs(c_np - c_nb)))))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--quick", action="store_true", help="small sizes only")
    args = ap.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    # compile (or load from cache) before timing
    kernels.clutter_enumerate(np.zeros(2), 0.5, 10.0, 100.0, "numba")
    y = np.array([1.0, -1.0])
    L = np.eye(2)
    kernels.ess_probit_chain(y, np.zeros(2), *draw_streams(ESSConfig(2, 0), L), backend="numba")

    sizes = [10, 14] if args.quick else [10, 14, 16, 18]
    lengths = [2000] if args.quick else [2000, 22000]
    rows = bench_enumeration(sizes, args.repeats) + bench_ess(lengths, args.repeats)

    print(f"{'kernel':<22}{'numpy [s]':>12}{'numba [s]':>12}{'speedup':>10}{'max |diff|':>14}")
    print("-" * 70)
    for name, t_np, t_nb, err in rows:
        print(f"{name:<22}{t_np:>12.4f}{t_nb:>12.4f}{t_np / t_nb:>9.1f}x{err:>14.2e}")


if __name__ == "__main__":
    main()
