"""Compare the numba kernels against their numpy fallbacks.

Two measurements:

* kernel level: each ``*_nb`` / ``*_np`` pair timed in-process on
  representative batch sizes (skipped for ``_nb`` when numba is missing);
* end to end: a short ignition run in subprocesses with and without
  ``BATCHODE_DISABLE_NUMBA=1``.

    python3 benchmarks/bench_kernels.py [--cells 256] [--repeat 200] [--skip-e2e]
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from batchode import kernels
from batchode._accel import USE_NUMBA


def _best(fn, args, repeat):
    fn(*args)   # compile / warm up
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(n_cells, n_comp, rng):
    n = n_cells * n_comp
    y = rng.standard_normal(n)
    w = rng.uniform(0.5, 2.0, n)
    atol = np.full(n, 1e-10)
    vecs = rng.standard_normal((6, n))
    coeffs = rng.standard_normal(6)
    out = np.empty(n)
    mats = rng.standard_normal((n_cells, n_comp, n_comp)) + 4 * np.eye(n_comp)
    piv = np.empty((n_cells, n_comp), dtype=np.int64)
    lu = mats.copy()
    kernels.lu_factor_np(lu, piv, kernels.SINGULAR_PIVOT)
    rhs = rng.standard_normal((n_cells, n_comp))
    basis = np.linalg.qr(rng.standard_normal((n, 21)))[0].T.copy()
    hcol = np.empty(22)
    return {
        "error_weights": ((y, 1e-7, atol, out), {}),
        "wrms_norm": ((y, w), {}),
        "linear_combination": ((coeffs, vecs, out), {}),
        "lu_factor": ((mats.copy(), piv, kernels.SINGULAR_PIVOT), {"fresh": lambda: mats.copy()}),
        "lu_solve": ((lu, piv, rhs.copy()), {}),
        "newton_matrix": ((mats, 0.1, np.empty_like(mats)), {}),
        "mgs_step": ((basis, 20, y.copy(), hcol), {}),
    }


def bench_kernels(n_cells, n_comp, repeat):
    rng = np.random.default_rng(0)
    rows = []
    for name, (args, _) in kernel_cases(n_cells, n_comp, rng).items():
        t_np = _best(getattr(kernels, f"{name}_np"), args, repeat)
        t_nb = _best(getattr(kernels, f"{name}_nb"), args, repeat) if USE_NUMBA else float("nan")
        rows.append((name, t_nb, t_np))
    return rows


E2E_SNIPPET = """
import json, time
from batchode.harness import SweepConfig, run_outer_loop
from batchode._accel import backend_name
cfg = SweepConfig(model="ignition", dt_cfd_list=(1e-3,), eta_list=(1e-10,), t_end=0.01,
                  n_cells={cells}, perturbation=100.0, seed=3, timeout_seconds=0)
run_outer_loop(cfg, "{approach}", 1e-3, 1e-10)
t0 = time.perf_counter()
res = run_outer_loop(cfg, "{approach}", 1e-3, 1e-10)
print(json.dumps(dict(backend=backend_name(), wall=time.perf_counter() - t0, steps=res.stats.n_steps)))
"""


def bench_end_to_end(n_cells, approach):
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, BATCHODE_DISABLE_NUMBA=flag)
        proc = subprocess.run([sys.executable, "-c", E2E_SNIPPET.format(cells=n_cells, approach=approach)],
                              env=env, capture_output=True, text=True, check=True)
        rec = json.loads(proc.stdout.strip().splitlines()[-1])
        out[rec["backend"]] = rec
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--cells", type=int, default=256)
    ap.add_argument("--comp", type=int, default=9)
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args(argv)

    print(f"kernels: {args.cells} cells x {args.comp} components, best of {args.repeat}")
    print(f"{'kernel':>20} {'numba_us':>10} {'numpy_us':>10} {'speedup':>8}")
    for name, t_nb, t_np in bench_kernels(args.cells, args.comp, args.repeat):
        print(f"{name:>20} {t_nb * 1e6:>10.2f} {t_np * 1e6:>10.2f} {t_np / t_nb:>8.2f}")

    if not args.skip_e2e:
        for approach in ("1B", "2B"):
            res = bench_end_to_end(64, approach)
            line = ", ".join(f"{k}: {v['wall']:.3f} s ({v['steps']} steps)" for k, v in sorted(res.items()))
            print(f"end-to-end ignition, 64 cells, approach {approach}: {line}")


if __name__ == "__main__":
    main()
