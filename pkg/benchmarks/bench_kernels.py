"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N]

Shapes are the ones the default desk-scale models actually hit. First calls
are made before timing so numba compilation is excluded.
"""
import argparse
import timeit

import numpy as np

from pseg import _kernels as K


def cases(rng):
    x_pe = rng.random((8, 3, 128, 128))          # patch embedding, k = s = 16
    x_c3 = rng.random((16, 8, 64, 64))           # detector 3x3 stride-2 conv
    act = rng.normal(size=(8, 64, 64))           # encoder MLP activations
    img = rng.random((32, 32))                   # logits -> image resize
    pred, gt = rng.random((128, 128)) > 0.5, rng.random((128, 128)) > 0.5
    blob = rng.bytes(1 << 20)
    cols = K.im2col_numpy(x_c3, 3, 2, 1)
    return {
        "im2col patch16": ("im2col", (x_pe, 16, 16, 0)),
        "im2col 3x3/s2": ("im2col", (x_c3, 3, 2, 1)),
        "col2im 3x3/s2": ("col2im", (cols, x_c3.shape, 3, 2, 1)),
        "gelu": ("gelu", (act,)),
        "gelu_grad": ("gelu_grad", (act, act)),
        "bilinear 32->128": ("bilinear_resize", (img, 128, 128)),
        "confusion 128^2": ("confusion", (pred, gt)),
        "fnv1a64 1 MiB": ("fnv1a64", (blob,)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is unavailable or disabled (PSEG_DISABLE_NUMBA); nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for label, (name, a) in cases(rng).items():
        row = []
        for impls in (K.NUMPY_IMPLS, K.NUMBA_IMPLS):
            fn = impls[name]
            fn(*a)  # warm-up / JIT
            number = 1 if name == "fnv1a64" and impls is K.NUMPY_IMPLS else 3
            t = min(timeit.repeat(lambda: fn(*a), number=number, repeat=args.repeat)) / number
            row.append(t * 1e3)
        print(f"{label:<20}{row[0]:>12.3f}{row[1]:>12.3f}{row[0] / row[1]:>9.1f}x")
    print(f"\nactive backend: {K.backend()} (im2col pinned to numpy; col2im uses numba only for overlapping windows)")


if __name__ == "__main__":
    main()
