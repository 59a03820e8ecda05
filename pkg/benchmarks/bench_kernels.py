"""Compiled vs numpy im2col/col2im timings.

    python benchmarks/bench_kernels.py [--repeat N]

Both backends are imported directly, so the ``DFCNET_PURE_PYTHON`` switch
does not matter here.  Outputs are also checked for bit equality.
"""
import argparse
import timeit

import numpy as np

from dfcnet import _kernels_py

try:
    from dfcnet import _kernels
except ImportError:  # extension not built
    _kernels = None

# (channels, size, kernel, stride, pad): shapes seen in the desk backbone
CASES = [
    (3, 32, 3, 1, 1),
    (16, 32, 3, 1, 1),
    (64, 16, 3, 1, 1),
    (112, 8, 3, 1, 1),
    (64, 32, 1, 1, 0),
    (16, 64, 3, 2, 1),
]


def _time(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def run(repeat=20, dtype=np.float32):
    rng = np.random.default_rng(0)
    rows = []
    for c, s, k, stride, pad in CASES:
        x = rng.standard_normal((1, c, s, s)).astype(dtype)
        o = (s + 2 * pad - k) // stride + 1
        args = (k, k, stride, pad, o, o)
        cols = _kernels_py.im2col(x, *args)
        back = (cols, c, s, s, k, k, stride, pad, o, o)
        row = {"case": f"c={c} {s}x{s} k={k} s={stride}",
               "py_im2col": _time(lambda: _kernels_py.im2col(x, *args), repeat),
               "py_col2im": _time(lambda: _kernels_py.col2im(*back), repeat)}
        if _kernels is not None:
            row["cy_im2col"] = _time(lambda: _kernels.im2col(x, *args), repeat)
            row["cy_col2im"] = _time(lambda: _kernels.col2im(*back), repeat)
            row["identical"] = (np.array_equal(np.asarray(_kernels.im2col(x, *args)), cols)
                                and np.array_equal(np.asarray(_kernels.col2im(*back)), _kernels_py.col2im(*back)))
        rows.append(row)
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rows = run(args.repeat)
    if _kernels is None:
        print("compiled extension not available; numpy timings only")
    print(f"{'case':<24s} {'im2col py':>10s} {'cy':>9s} {'x':>5s}   {'col2im py':>10s} {'cy':>9s} {'x':>5s}  same")
    for r in rows:
        if "cy_im2col" in r:
            print(f"{r['case']:<24s} {r['py_im2col'] * 1e3:8.3f}ms {r['cy_im2col'] * 1e3:7.3f}ms "
                  f"{r['py_im2col'] / r['cy_im2col']:5.1f}   {r['py_col2im'] * 1e3:8.3f}ms "
                  f"{r['cy_col2im'] * 1e3:7.3f}ms {r['py_col2im'] / r['cy_col2im']:5.1f}  {r['identical']}")
        else:
            print(f"{r['case']:<24s} {r['py_im2col'] * 1e3:8.3f}ms   {r['py_col2im'] * 1e3:8.3f}ms")


if __name__ == "__main__":
    main()
