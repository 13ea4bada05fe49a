"""Benchmark the MX codec kernels: numba backend versus the numpy twin.

Usage:
    python benchmarks/bench_quantize.py [--blocks N] [--repeats R]

The same comparison can be forced package-wide at runtime by setting
MXQUANT_DISABLE_NUMBA=1, which makes the package use the numpy path.
"""

import argparse
import time

import numpy as np

from mxquant import E2M1, E4M3
from mxquant import _kernels as K


def bench(fn, *args, repeats=5):
    fn(*args)  # warm-up (and numba compile)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--blocks", type=int, default=131072, help="number of 32-element blocks")
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    x = rng.normal(size=(args.blocks, 32)) * 10.0 ** rng.uniform(-3, 3, size=(args.blocks, 1))
    mb = x.nbytes / 1e6
    print(f"{args.blocks} blocks ({mb:.0f} MB float64), best of {args.repeats}")
    print(f"numba available: {K.HAS_NUMBA}\n")

    header = f"{'kernel':<22} {'numpy':>10} {'numba':>10} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for fmt in (E2M1, E4M3):
        cases = [
            (f"encode[{fmt.name}]", (K.encode_blocks_np, "encode_blocks_nb"),
             (x, fmt.value_set, fmt.emax, fmt.sign_shift)),
            (f"qdq[{fmt.name}]", (K.qdq_blocks_np, "qdq_blocks_nb"),
             (x, fmt.value_set, fmt.emax)),
        ]
        se, codes = K.encode_blocks_np(x, fmt.value_set, fmt.emax, fmt.sign_shift)
        cases.append(
            (f"decode[{fmt.name}]", (K.decode_blocks_np, "decode_blocks_nb"),
             (se, codes, fmt.value_set, fmt.sign_shift))
        )
        for name, (np_fn, nb_name), fn_args in cases:
            t_np = bench(np_fn, *fn_args, repeats=args.repeats)
            if K.HAS_NUMBA:
                nb_fn = getattr(K, nb_name)
                t_nb = bench(nb_fn, *fn_args, repeats=args.repeats)
                print(f"{name:<22} {t_np * 1e3:>8.1f}ms {t_nb * 1e3:>8.1f}ms {t_np / t_nb:>8.1f}x")
            else:
                print(f"{name:<22} {t_np * 1e3:>8.1f}ms {'-':>10} {'-':>9}")


if __name__ == "__main__":
    main()
