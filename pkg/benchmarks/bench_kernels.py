"""Time the propensity kernels under both backends.

    python3 benchmarks/bench_kernels.py --n 20000 --K 10 100 --repeat 3

For each setting, the script runs ``propensities`` with gradients once with
``SEQOPS_NUMBA=1`` and once with ``SEQOPS_NUMBA=0``. It reports the best
wall time of each and the largest absolute difference between the outputs.
The first numba call is excluded from timing (compilation).
"""
import argparse
import os
import time

import numpy as np

from seqops._accel import _HAVE_NUMBA
from seqops.policy import QUADRATURE, GaussianPolicyParams, PropensityConfig, propensities


def _time(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench(n, K, d, cfg, repeat, rng):
    pol = GaussianPolicyParams(rng.standard_normal((K, d)), 1.0)
    X = rng.standard_normal((n, d))
    a = rng.integers(0, K, n)

    def call():
        return propensities(pol, X, a, cfg, want_grad=True)

    rows = {}
    for flag in ("1", "0"):
        os.environ["SEQOPS_NUMBA"] = flag
        if flag == "1":
            call()  # compile
        rows[flag] = _time(call, repeat)
    (t_nb, (p_nb, c_nb, _)), (t_np, (p_np, c_np, _)) = rows["1"], rows["0"]
    diff = max(np.max(np.abs(p_nb - p_np)), np.max(np.abs(c_nb - c_np)))
    return t_nb, t_np, diff


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--K", type=int, nargs="+", default=[10, 100])
    ap.add_argument("--d", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not _HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(args.seed)
    modes = [("monte_carlo S=32", PropensityConfig()), ("gauss_hermite 64", QUADRATURE)]
    print(f"{'mode':<18}{'K':>5}{'n':>8}{'numba s':>10}{'numpy s':>10}{'speedup':>9}{'max diff':>11}")
    saved = os.environ.get("SEQOPS_NUMBA")
    try:
        for name, cfg in modes:
            for K in args.K:
                t_nb, t_np, diff = bench(args.n, K, args.d, cfg, args.repeat, rng)
                print(f"{name:<18}{K:>5}{args.n:>8}{t_nb:>10.3f}{t_np:>10.3f}"
                      f"{t_np / t_nb:>8.1f}x{diff:>11.1e}")
    finally:
        if saved is None:
            os.environ.pop("SEQOPS_NUMBA", None)
        else:
            os.environ["SEQOPS_NUMBA"] = saved


if __name__ == "__main__":
    main()
