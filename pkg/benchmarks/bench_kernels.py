"""Compare the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat 5]

Reports median wall time per call for the prox map and a batch solve,
and checks that both backends agree.
"""
import argparse
import statistics
import time

import numpy as np

from gbpkit.dictionary import L1, L2, Dictionary, GroupPartition, RegularizerSpec, elastic
from gbpkit.kernels import get_backend


def _time(fn, repeat):
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return statistics.median(out)


def cases(rng):
    part = GroupPartition.contiguous(300, 4)
    norms = [(L1, L2, elastic(0.5))[k % 3] for k in range(part.n_groups)]
    spec = RegularizerSpec(part, tuple(norms), np.full(part.n_groups, 0.3))
    D = Dictionary.normalized(rng.standard_normal((100, 300)))
    X = rng.standard_normal((256, 100))
    return spec, D, X


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(42)
    spec, D, X = cases(rng)
    idx, ptr, a, b = spec.kernel_arrays
    V = rng.standard_normal((256, 300))
    M = D.matrix
    step = 1.0 / D.lipschitz
    X0 = np.zeros((X.shape[0], 300))
    tol = 1e-7 * (1.0 + np.linalg.norm(X, axis=1))
    try:
        backends = {"python": get_backend("python"), "compiled": get_backend("compiled")}
    except ImportError:
        backends = {"python": get_backend("python")}
        print("compiled backend not built; timing the numpy fallback only")
    results = {}
    for name, k in backends.items():
        t_prox = _time(lambda: k.prox(V, step, idx, ptr, a, b, False), args.repeat)
        t_solve = _time(lambda: k.fista_batch(M, X, X0, step, idx, ptr, a, b, False, True, 500, tol, 1e-9, 10),
                        args.repeat)
        results[name] = (t_prox, t_solve, k.fista_batch(M, X, X0, step, idx, ptr, a, b, False, True, 500, tol,
                                                         1e-9, 10)[0])
        print(f"{name:9s} prox {1e3 * t_prox:8.3f} ms   batch solve (256 x 300) {1e3 * t_solve:9.1f} ms")
    if len(results) == 2:
        py, cc = results["python"], results["compiled"]
        diff = float(np.max(np.abs(py[2] - cc[2])))
        print(f"speedup   prox {py[0] / cc[0]:6.1f}x   batch solve {py[1] / cc[1]:6.1f}x   max code diff {diff:.2e}")


if __name__ == "__main__":
    main()
