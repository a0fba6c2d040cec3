"""Compare the numba and numpy backends of the convolution patch kernels.

    python3 benchmarks/bench_kernels.py [--batch 32] [--size 32] [--features 32] [--repeat 20]

Times im2col, col2im and one full training step of the tiny network under each
backend, and checks that both backends give identical results.
"""

import argparse
import time

import numpy as np

from forgelab.denoiser import kernels
from forgelab.denoiser.network import TinyNet


def best_of(fn, repeat):
    fn()  # warm-up (includes jit compilation)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--features", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    n, s, f = args.batch, args.size, args.features
    x = rng.standard_normal((n, s, s, f)).astype(np.float32)
    cols = rng.standard_normal((n, s, s, 9 * f)).astype(np.float32)
    img = rng.standard_normal((n, s, s, 1)).astype(np.float32)
    b = rng.integers(10, 1000, size=n)
    g = rng.uniform(0.0, 30.0, size=n)
    net = TinyNet(s, 1, f, seed=0)

    if not kernels.HAVE_NUMBA:
        print("numba not importable; only the numpy backend is available")
    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    results, outputs = {}, {}
    previous = kernels.backend()
    try:
        for name in backends:
            kernels.set_backend(name)
            results[name] = {
                "im2col": best_of(lambda: kernels.im2col(x), args.repeat),
                "col2im": best_of(lambda: kernels.col2im(cols, f), args.repeat),
                "train step": best_of(lambda: net.loss_and_grads(img, b, g, img), args.repeat),
            }
            outputs[name] = (kernels.im2col(x), kernels.col2im(cols, f))
    finally:
        kernels.set_backend(previous)

    print(f"batch={n} size={s} features={f} best of {args.repeat}")
    print(f"{'kernel':<12}" + "".join(f"{k:>12}" for k in backends) + ("     speedup" if len(backends) > 1 else ""))
    for op in results["numpy"]:
        row = f"{op:<12}" + "".join(f"{results[k][op] * 1e3:>10.2f}ms" for k in backends)
        if len(backends) > 1:
            row += f"{results['numpy'][op] / results['numba'][op]:>11.2f}x"
        print(row)
    if len(backends) > 1:
        same = all(np.allclose(a, c, rtol=1e-5, atol=1e-5) for a, c in zip(outputs["numpy"], outputs["numba"]))
        print("backends agree:", same)


if __name__ == "__main__":
    main()
