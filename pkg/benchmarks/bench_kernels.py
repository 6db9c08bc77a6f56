"""Time the numba and pure-numpy variants of each hot kernel on desk-sized inputs.

    python benchmarks/bench_kernels.py [--repeat N]

The variants are also checked for agreement before timing. The process-wide
choice between them is made by PHYSMLE_DISABLE_NUMBA; this script imports
both explicitly.
"""
import argparse
import timeit

import numpy as np

from physmle import kernels
from physmle.grad import ops


def cases(rng):
    # first block conv of the desk model at batch 16: (16, 16, 33, 129) padded input, 3x3 stride 2
    xp = rng.standard_normal((16, 16, 34, 130)).astype(np.float32)
    geo = (3, 3, 2, 2, 16, 64)
    g = rng.standard_normal((16, 16 * 9, 16 * 64)).astype(np.float32)
    sig = np.sin(np.arange(20 * 256) / 30 * 2 * np.pi * 1.3) + 0.1 * rng.standard_normal(20 * 256)
    peaks = kernels.local_maxima_numpy(sig)
    heights = sig[peaks]
    return {
        "im2col": (lambda f: f(xp, *geo), kernels.im2col_numpy, kernels.im2col_numba),
        "col2im": (lambda f: f(g, xp.shape, *geo), kernels.col2im_numpy, kernels.col2im_numba),
        "local_maxima": (lambda f: f(sig), kernels.local_maxima_numpy, kernels.local_maxima_numba),
        "distance_filter": (lambda f: f(peaks, heights, 8), kernels.distance_filter_numpy,
                            kernels.distance_filter_numba),
    }


def conv_step(rng):
    """Forward + backward of one desk conv through the dispatching kernels."""
    from physmle.grad import Tensor, backward

    x = Tensor(rng.standard_normal((16, 16, 32, 128)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.standard_normal((32, 16, 3, 3)).astype(np.float32), requires_grad=True)

    def run():
        backward(ops.sum_(ops.conv2d(x, w, 2, 1)))
    return run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0],
                                 formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5, help="timing repeats (best is reported)")
    ap.add_argument("--number", type=int, default=10, help="calls per repeat")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"dispatch backend: {kernels.BACKEND}")
    print(f"{'kernel':<16} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, (call, np_impl, nb_impl) in cases(rng).items():
        a, b = call(np_impl), call(nb_impl)
        assert np.allclose(np.asarray(a), np.asarray(b), atol=1e-5), name
        t_np = min(timeit.repeat(lambda: call(np_impl), number=args.number, repeat=args.repeat)) / args.number
        t_nb = min(timeit.repeat(lambda: call(nb_impl), number=args.number, repeat=args.repeat)) / args.number
        print(f"{name:<16} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} {t_np / t_nb:>8.2f}")
    step = conv_step(rng)
    t = min(timeit.repeat(step, number=3, repeat=args.repeat)) / 3
    print(f"conv fwd+bwd via {kernels.BACKEND}: {t * 1e3:.2f} ms")


if __name__ == "__main__":
    main()
