"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel with the best-of-N time per call for each
backend and the speedup; also checks that both backends agree.
"""
import argparse
import importlib
import timeit

import numpy as np

from msgaze.kernels import _fallback


def cases(rng):
    ang = np.sort(rng.uniform(0, 2 * np.pi, 32))
    iris = (30 + 6 * np.cos(ang), 18 + 5 * np.sin(ang))
    star_t = np.pi / 2 + np.arange(17) * 2 * np.pi * 8 / 17
    star = (30 + 16 * np.cos(star_t), 18 + 16 * np.sin(star_t))
    image = rng.normal(128, 10, (36, 60))
    big = rng.normal(128, 10, (200, 200))
    return {
        "fill_polygon[iris 32 pts, 36x60]": ("fill_polygon", (*iris, 36, 60), None),
        "fill_polygon[star 17 pts, 36x60]": ("fill_polygon", (*star, 36, 60), None),
        "draw_line[diagonal 36x60]": ("draw_line", (image.copy(), 0, 0, 35, 59, 255.0), None),
        "noise_response_sumsq[36x60]": ("noise_response_sumsq", (image,), None),
        "noise_response_sumsq[200x200]": ("noise_response_sumsq", (big,), None),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=200)
    args = ap.parse_args()
    try:
        compiled = importlib.import_module("msgaze.kernels._ckernels")
    except ImportError:
        raise SystemExit("compiled extension is not built; run `pip install -e . --no-build-isolation`")

    rng = np.random.default_rng(0)
    print(f"{'kernel':36s} {'python (us)':>12s} {'cython (us)':>12s} {'speedup':>8s}")
    for name, (fn, fargs, _) in cases(rng).items():
        a, b = getattr(_fallback, fn), getattr(compiled, fn)
        ra, rb = a(*fargs), b(*fargs)
        if fn == "fill_polygon":
            assert np.array_equal(ra, rb), name
        elif fn == "noise_response_sumsq":
            assert np.isclose(ra, rb, rtol=1e-12), name
        ta = min(timeit.repeat(lambda: a(*fargs), number=args.number, repeat=args.repeat)) / args.number
        tb = min(timeit.repeat(lambda: b(*fargs), number=args.number, repeat=args.repeat)) / args.number
        print(f"{name:36s} {ta * 1e6:12.1f} {tb * 1e6:12.1f} {ta / tb:7.1f}x")


if __name__ == "__main__":
    main()
