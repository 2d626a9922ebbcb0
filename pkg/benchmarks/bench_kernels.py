"""Compare the compiled and pure-Python kernel backends.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from amlab import kernels


def cases(rng):
    n, c = 256, 100
    cos = np.clip(rng.normal(scale=0.4, size=(n, c)), -1, 1)
    labels = rng.integers(0, c, n)
    scale = np.full(n, 30.0)
    scores = rng.normal(size=(500, 1000))
    mate = rng.integers(0, 1000, 500)
    return {
        "margin_rows/am (256x100)": lambda k: k.margin_softmax_rows(cos, labels, scale, kernels.PSI_ADDITIVE, 0.35, 1, 0.0),
        "margin_rows/angular (256x100)": lambda k: k.margin_softmax_rows(cos, labels, scale, kernels.PSI_ANGULAR, 0.0, 4, 5.0),
        "fill_normals (100k)": lambda k: k.fill_normals(np.array([1, 2, 3, 4], dtype=np.uint64), np.empty(100_000), 0.0, 1.0),
        "count_greater (500x1000)": lambda k: k.count_greater(scores, mate),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    backends = {"python": kernels.backend_module("python")}
    try:
        backends["cython"] = kernels.backend_module("cython")
    except ImportError:
        print("compiled backend not built; timing the fallback only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<32}" + "".join(f"{name:>12}" for name in backends) + ("     speedup" if len(backends) > 1 else ""))
    for label, fn in cases(rng).items():
        best = {}
        for name, mod in backends.items():
            fn(mod)  # warm up
            best[name] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
        row = f"{label:<32}" + "".join(f"{best[n] * 1e3:>10.2f}ms" for n in backends)
        if "cython" in best:
            row += f"{best['python'] / best['cython']:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
