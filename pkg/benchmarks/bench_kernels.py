"""Time every kernel under the numba and numpy backends.

    python benchmarks/bench_kernels.py [--repeat 20]

Numba is run in strict mode (its own version of every kernel) after one
warm-up call so compilation time is excluded.
"""

import argparse
import time

import numpy as np

from dinocell import kernels as K


def workloads(rng):
    x = rng.standard_normal((64 * 257, 64)).astype(np.float32)
    att = rng.standard_normal((64 * 4 * 65, 65)).astype(np.float32)
    y = K.softmax_rows(att)
    g = np.ones(64, np.float32)
    b = np.zeros(64, np.float32)
    _, xhat, rstd = K.layernorm_rows(x, g, b, 1e-6)
    h = rng.standard_normal((64 * 257, 256)).astype(np.float32)
    img = rng.random((4, 96, 96)).astype(np.float32)
    emb = rng.standard_normal((500, 64))
    sim = K.cosine_matrix(emb)
    nb = K.rank_neighbors(sim, 20)
    labels = (rng.random((500, 17)) < 0.2).astype(np.float64)
    return {
        "softmax_rows": (att,),
        "softmax_rows_backward": (y, y),
        "layernorm_rows": (x, g, b, 1e-6),
        "layernorm_rows_backward": (x, xhat, rstd, g),
        "gelu": (h,),
        "gelu_backward": (h, h),
        "resize_bilinear": (img, 64, 64),
        "cosine_matrix": (emb,),
        "rank_neighbors": (sim, 20),
        "soft_vote": (sim, nb, labels, 0.07),
    }


def bench(fn, args, repeat):
    fn(*args)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    data = workloads(rng)
    results = {}
    for name in K.available_backends():
        K.set_backend(name, strict=True)
        results[name] = {k: bench(getattr(K, k), data[k], args.repeat) for k in K.KERNELS}
    K.set_backend(K._initial())
    cols = sorted(results)
    print(f"{'kernel':<26}" + "".join(f"{c + ' ms':>12}" for c in cols)
          + ("  numpy/numba" if len(cols) == 2 else ""))
    for k in K.KERNELS:
        row = f"{k:<26}" + "".join(f"{results[c][k] * 1e3:>12.3f}" for c in cols)
        if len(cols) == 2:
            row += f"  {results['numpy'][k] / results['numba'][k]:>10.2f}x"
        print(row)
    print("default dispatch:", {k: K.implementation(k) for k in K.KERNELS})


if __name__ == "__main__":
    main()
