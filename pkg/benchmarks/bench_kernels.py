"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--size 256] [--repeat 20]

Kernels are timed side by side in this process. The full ``canny_edges`` call
is timed in two subprocesses, one with ``CANNYEDIT_PURE_NUMPY=1``, because the
backend is fixed at import time.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from cannyedit import _kernels
from cannyedit.canny import gaussian_blur, quantize_direction, sobel_gradients
from cannyedit.imageio import Image

_CANNY_SNIPPET = """
import json, timeit, numpy as np
from cannyedit._accel import backend
from cannyedit.canny import canny_edges
from cannyedit.imageio import Image
img = Image(np.random.default_rng(0).random(({n}, {n})))
canny_edges(img)
print(json.dumps({{"backend": backend(), "sec": min(timeit.repeat(lambda: canny_edges(img), number=1, repeat={r}))}}))
"""


def _best(fn, repeat: int) -> float:
    fn()  # warm-up / JIT
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_table(size: int, repeat: int) -> list[tuple[str, float, float]]:
    rng = np.random.default_rng(0)
    img = gaussian_blur(Image(rng.random((size, size))), 1.0).data
    mag, direction = sobel_gradients(Image(img))
    bins = quantize_direction(direction)
    thin = _kernels.nms_np(mag, bins)
    peak = float(mag.max())
    mask = rng.random((size, size)) < 0.45
    return [
        ("nms", _best(lambda: _kernels.nms_nb(mag, bins, _kernels._OFFSETS), repeat),
         _best(lambda: _kernels.nms_np(mag, bins), repeat)),
        ("hysteresis", _best(lambda: _kernels.hysteresis_nb(thin, 0.1 * peak, 0.3 * peak), repeat),
         _best(lambda: _kernels.hysteresis_np(thin, 0.1 * peak, 0.3 * peak), repeat)),
        ("label", _best(lambda: _kernels.label_nb(mask), repeat), _best(lambda: _kernels.label_np(mask), repeat)),
    ]


def canny_by_backend(size: int, repeat: int) -> dict[str, float]:
    out = {}
    for pure in ("0", "1"):
        env = {**os.environ, "CANNYEDIT_PURE_NUMPY": pure}
        res = subprocess.run([sys.executable, "-c", _CANNY_SNIPPET.format(n=size, r=repeat)], env=env,
                             capture_output=True, text=True, check=True)
        row = json.loads(res.stdout.strip().splitlines()[-1])
        out[row["backend"]] = row["sec"]
    return out


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    print(f"{args.size}x{args.size}, best of {args.repeat}")
    print(f"{'kernel':<12}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, nb, np_ in kernel_table(args.size, args.repeat):
        print(f"{name:<12}{nb * 1e3:>10.3f}{np_ * 1e3:>10.3f}{np_ / nb:>8.1f}x")
    full = canny_by_backend(args.size, args.repeat)
    print(f"{'canny_edges':<12}{full['numba'] * 1e3:>10.3f}{full['numpy'] * 1e3:>10.3f}"
          f"{full['numpy'] / full['numba']:>8.1f}x")


if __name__ == "__main__":
    main()
