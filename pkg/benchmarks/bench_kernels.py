"""Compare the numba and numpy variants of the hot kernels.

    python benchmarks/bench_kernels.py [--repeat 20]

Shapes match a desk-scale training step (batch 32, 32 channels, M=10, K=4).
The first numba call (compilation) is excluded from the timings.
"""

import argparse
import timeit

import numpy as np

from mdgnn import _accel, kernels


def _cases(rng):
    B, C, M, K = 32, 32, 10, 4
    # neighbour sums along the AP axis (P=1, D=M, Q=K) and the UE axis (P=M, D=K, Q=1)
    for name, (P, D, Q) in (("masked_sum AP axis", (1, M, K)), ("masked_sum UE axis", (M, K, 1))):
        x = rng.standard_normal((B, C, P, D, Q))
        mask = (rng.uniform(size=(B, P, D, Q, D)) < 0.5).astype(float)
        yield name, kernels.masked_sum_numba, kernels.masked_sum_numpy, (mask, x)
        g = rng.standard_normal(x.shape)
        yield name.replace("sum", "outer"), kernels.masked_outer_numba, kernels.masked_outer_numpy, (g, x)
    lam = rng.uniform(0, 2, (B * M, 4))
    energy = rng.uniform(0, 3, (B * M, 4))
    p = np.full(B * M, 0.5)
    yield "power multiplier", kernels.multiplier_numba, kernels.multiplier_numpy, (lam, energy, p)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; both columns time the numpy path")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}  max |diff|")
    for name, fast, slow, a in _cases(rng):
        ref = slow(*a)
        out = fast(*a)                                  # warm-up / compile
        tf = min(timeit.repeat(lambda: fast(*a), number=1, repeat=args.repeat)) * 1e3
        ts = min(timeit.repeat(lambda: slow(*a), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<22} {tf:10.3f} {ts:10.3f} {ts / tf:7.1f}x  {np.abs(out - ref).max():.1e}")


if __name__ == "__main__":
    main()
