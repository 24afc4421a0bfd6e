"""Time each hot kernel under the numba and pure-numpy implementations.

Shapes follow one desk-scale training step (4 patches of 8 x 64 voxels,
40 frames) and one oracle pass over a 64 x 64 slice.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from synperf import kernels
from synperf.osvd import circulant_system
from synperf.phantom import AIFParams, gamma_variate_aif


def cases(rng):
    M, T = 4 * 8 * 64, 40
    act = rng.normal(size=(M, T, 64)).astype(np.float32)
    pooled, first = kernels.NUMPY_IMPL["maxpool2"](act)
    y = np.where(act > 0, act, np.expm1(np.minimum(act, 0)))
    n = 4 * 8 * 64
    p, p_hat, log_b = rng.uniform(-10, 60, n), rng.uniform(-10, 60, n), rng.normal(size=n)
    t = 1.5 * np.arange(T)
    U, s_inv, V = circulant_system(gamma_variate_aif(t, AIFParams.with_peak(1.2)), 1.5)
    proj = rng.normal(size=(64 * 64, T)) @ U[:T, :]
    return {
        "osvd": (V, s_inv, proj, 0.095, int(np.count_nonzero(s_inv))),
        "smooth": (rng.normal(size=(T, 4 * 64 * 64)), kernels.gaussian_kernel(1.0)),
        "maxpool2": (act,),
        "maxpool2_backward": (np.ones_like(pooled), first, T),
        "laplace": (p, p_hat, log_b, 0.0, 40.0, 1.0, 0.1, True),
        "selu_backward": (y, rng.normal(size=y.shape).astype(np.float32)),
        "col2im_time": (rng.normal(size=(M, T, 5, 64)).astype(np.float32),),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed")
    inputs = cases(np.random.default_rng(0))
    print("kernel\tnumpy_ms\tnumba_ms\tspeedup")
    for name, call_args in inputs.items():
        fast, slow = kernels.NUMBA_IMPL[name], kernels.NUMPY_IMPL[name]
        fast(*call_args)  # compile
        best = {}
        for label, fn in (("numpy", slow), ("numba", fast)):
            best[label] = min(timeit.repeat(lambda: fn(*call_args), number=1, repeat=args.repeat)) * 1e3
        print(f"{name}\t{best['numpy']:.2f}\t{best['numba']:.2f}\t{best['numpy'] / best['numba']:.1f}x")


if __name__ == "__main__":
    main()
