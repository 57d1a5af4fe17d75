"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5]

Shapes follow ViT-Micro at p=1 (785 tokens, 4 heads), which is where the
row kernels dominate a training step. With ``VITLAB_DISABLE_NUMBA=1`` both
columns run numpy and the table is only a sanity check.
"""
import argparse
import timeit

import numpy as np

from vitlab import kernels as K
from vitlab._backend import backend_name


def cases(rng):
    att = rng.standard_normal((4 * 785, 785)).astype(np.float32)
    soft = np.empty_like(att)
    K.softmax_rows_np(att, 0.125, soft)
    tok = rng.standard_normal((785, 64)).astype(np.float32)
    ln = (tok, np.ones(64, np.float32), np.zeros(64, np.float32), 1e-6,
          np.empty_like(tok), np.empty_like(tok), np.empty(785, np.float32))
    hid = rng.standard_normal((785, 256)).astype(np.float32)
    theta = rng.standard_normal(1_000_000)
    img = rng.random((28, 28, 3))
    mat = np.array([[0.9, -0.2, 3.0], [0.2, 0.9, -1.0]])
    return {
        "softmax_rows": lambda impl: impl(att, 0.125, np.empty_like(att)),
        "softmax_rows_backward": lambda impl: impl(soft, att, 0.125, np.empty_like(att)),
        "layer_norm_rows": lambda impl: impl(*ln),
        "gelu": lambda impl: impl(hid, np.empty_like(hid)),
        "gelu_backward": lambda impl: impl(hid, hid, np.empty_like(hid)),
        "adamw_update": lambda impl: impl(theta.copy(), theta, np.zeros_like(theta), np.zeros_like(theta),
                                          1e-3, 0.9, 0.999, 1e-8, 0.05, 0.1, 0.001),
        "warp_bilinear": lambda impl: impl(img, mat, np.empty_like(img)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    print(f"backend: {backend_name()}")
    print(f"{'kernel':<24}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, run in cases(np.random.default_rng(0)).items():
        nb, npy = getattr(K, f"{name}_nb"), getattr(K, f"{name}_np")
        run(nb)  # compile outside the timed region
        t_nb = min(timeit.repeat(lambda: run(nb), number=1, repeat=args.repeat)) * 1e3
        t_np = min(timeit.repeat(lambda: run(npy), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<24}{t_nb:>10.2f}{t_np:>10.2f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
