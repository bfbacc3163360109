"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Sizes follow the bundled synthetic city: about a million records binned
into 1024 finest units, 720-hour frames, and an Adam step over the
largest model in the default matrix.
"""

import argparse
import timeit

import numpy as np

from disagg import _pykernels

try:
    from disagg import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    n = 1_000_000
    ts = rng.uniform(0, 720 * 3600, n)
    x, y = rng.uniform(0, 6400, n), rng.uniform(0, 6400, n)
    cell_unit = rng.integers(0, 1024, 128 * 128).astype(np.int64)
    parent = np.repeat(np.arange(256), 4).astype(np.int64)
    fine = rng.poisson(1.5, (720, 1024)).astype(float)
    coarse = rng.poisson(6.0, (720, 256)).astype(float)
    share = rng.uniform(size=1024)
    size = 4 * 16 + 16 * 64 + 64 * 256 + 256 * 1024
    p, g = rng.normal(size=size), rng.normal(size=size)
    state = {}

    def adam(impl):
        m, v = state.setdefault(impl.__name__, (np.zeros(size), np.zeros(size)))
        return impl.adam_update(p, g, m, v, 1e-4, 0.9, 0.999, 0.5, 0.5, 1e-8)

    return {
        "bin_records (1M records)":
            lambda k: k.bin_records(ts, x, y, 0, 720, 50.0, 128, 128, cell_unit, 1024),
        "segment_sum (720 x 1024 -> 256)": lambda k: k.segment_sum(fine, parent, 256),
        "scatter_shares (720 x 256 -> 1024)": lambda k: k.scatter_shares(coarse, parent, share),
        f"adam_update ({size} params)": adam,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':40s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:40s} {py:10.2f} {'-':>10s} {'-':>8s}")
            continue
        c = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:40s} {py:10.2f} {c:10.2f} {py / c:7.1f}x")


if __name__ == "__main__":
    main()
