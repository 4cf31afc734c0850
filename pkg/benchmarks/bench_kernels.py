"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from fatq import _backend
from fatq.numerics import make_rng
from fatq.quantizers import QuantConfig


def cases(rng):
    toy = rng.normal(size=(16, 72))
    w = rng.normal(size=(256, 27))
    big = rng.normal(size=(64, 576))
    spec = np.fft.fft(w, axis=1)
    levels = QuantConfig(4, "log", True, 1.0).scaled_levels
    x = rng.uniform(-1.2, 1.2, size=10**6)
    toy_spec = np.fft.fft(toy, axis=1)
    return [
        ("dft_rows 16x72", "dft_rows", (toy,)),
        ("idft_rows 16x72", "idft_rows", (toy_spec.real.copy(), toy_spec.imag.copy())),
        ("dft_rows 256x27", "dft_rows", (w,)),
        ("dft_rows 64x576", "dft_rows", (big,)),
        ("idft_rows 256x27", "idft_rows", (spec.real.copy(), spec.imag.copy())),
        ("nearest_level 1e6", "nearest_level", (x, levels)),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    names = ["python"] + (["cython"] if _backend.BACKEND == "cython" else [])
    if len(names) == 1:
        print("compiled kernels not built; only the fallback is timed")
    print(f"{'kernel':<20}" + "".join(f"{n + ' ms':>14}" for n in names) + ("   speedup" if len(names) == 2 else ""))
    for label, fn, fargs in cases(make_rng(0)):
        times = []
        for name in names:
            f = getattr(_backend.get(name), fn)
            times.append(min(timeit.repeat(lambda: f(*fargs), number=10, repeat=args.repeat)) * 1e2)
        line = f"{label:<20}" + "".join(f"{t:>14.3f}" for t in times)
        if len(times) == 2:
            line += f"{times[0] / times[1]:>10.2f}x"
        print(line)


if __name__ == "__main__":
    main()
