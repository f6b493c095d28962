"""Numba vs pure-numpy timings for the degradation and SSIM hot loops.

    python benchmarks/bench_kernels.py [--repeat 20]

Each case is run once per backend before timing so JIT compilation is
excluded.  Outputs of the two backends are compared as a sanity check.
"""

import argparse
import time

import numpy as np

from mrda import accel
from mrda.degradation import DegradationSpec, KernelSpec, degrade_classic
from mrda.evaluation import ssim
from mrda.kernels import blur_subsample, filter_valid_separable


def cases(rng):
    padded = rng.uniform(size=(128 + 20, 128 + 20, 3))
    kernel = KernelSpec.isotropic(2.0).build(21)
    img = rng.uniform(size=(256, 256))
    taps = np.exp(-0.5 * (np.arange(11) - 5) ** 2 / 1.5**2)
    taps /= taps.sum()
    hr = rng.uniform(size=(128, 128, 3))
    spec = DegradationSpec(kernel=KernelSpec.anisotropic(3.0, 0.5, 0.7), scale=4)
    a, b = rng.uniform(size=(96, 96, 3)), rng.uniform(size=(96, 96, 3))
    return {
        "blur_subsample 128px k21 x2": lambda: blur_subsample(padded, kernel, 2, 64, 64),
        "filter_valid_separable 256px n11": lambda: filter_valid_separable(img, taps),
        "degrade_classic 128px x4": lambda: degrade_classic(hr, spec),
        "ssim 96px": lambda: ssim(a, b),
    }


def timed(fn, repeat):
    out = fn()
    start = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - start) / repeat, out


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if not accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed")

    table = cases(np.random.default_rng(0))
    print(f"{'case':36s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max diff':>10s}")
    for name, fn in table.items():
        accel.disable_jit()
        t_np, ref = timed(fn, args.repeat)
        accel.enable_jit()
        t_nb, out = timed(fn, args.repeat)
        diff = float(np.max(np.abs(np.asarray(out) - np.asarray(ref))))
        print(f"{name:36s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.2f} {diff:10.1e}")


if __name__ == "__main__":
    main()
