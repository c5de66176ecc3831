"""Microbenchmark of the numpy kernels against their compiled twins.

Run as `python3 -m fewstory.bench [--repeat N] [--size {small,large}]`.
Prints one row per kernel with the mean wall time of each flavour and the
speedup ratio, plus which backend the package picked at import time.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from . import kernels

SHAPES = {
    "small": {"rows": 64, "cols": 64, "steps": 10, "scatter": 256},
    "large": {"rows": 512, "cols": 256, "steps": 30, "scatter": 4096},
}


def _inputs(name: str, size: dict, rng):
    r, c, t = size["rows"], size["cols"], size["steps"]
    if name in ("sigmoid", "tanh"):
        return (rng.standard_normal((r, c)),)
    if name in ("softmax_rows", "logsumexp_rows"):
        return (rng.standard_normal((r, c)),)
    if name == "att_scores":
        return (rng.standard_normal((r, t, c)), rng.standard_normal((r, c)))
    if name == "att_apply":
        w = rng.random((r, t))
        w /= w.sum(axis=1, keepdims=True)
        return (w, rng.standard_normal((r, t, c)))
    if name == "att_outer":
        return (rng.standard_normal((r, t)), rng.standard_normal((r, c)))
    if name == "scatter_add_rows":
        n = size["scatter"]
        idx = rng.integers(0, r, size=n)
        return (rng.standard_normal((n, c)), idx, r)
    raise KeyError(name)


def _time(fn, args, repeat: int) -> float:
    fn(*args)  # warm-up covers jit compilation
    return min(timeit.repeat(lambda: fn(*args), number=repeat, repeat=3)) / repeat


def run(repeat: int, size_name: str) -> list:
    size = SHAPES[size_name]
    rng = np.random.default_rng(0)
    np_table = kernels.numpy_table()
    try:
        nb_table = kernels.numba_table()
    except ImportError:
        nb_table = None
    rows = []
    for name in sorted(np_table):
        args = _inputs(name, size, rng)
        t_np = _time(np_table[name], args, repeat)
        if nb_table is None:
            rows.append((name, t_np, None, None))
            continue
        t_nb = _time(nb_table[name], args, repeat)
        a = np.asarray(np_table[name](*args))
        b = np.asarray(nb_table[name](*args))
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12), name
        rows.append((name, t_np, t_nb, t_np / t_nb))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--size", choices=sorted(SHAPES), default="small")
    args = ap.parse_args(argv)

    print(f"active backend: {kernels.BACKEND}")
    print(f"shapes: {SHAPES[args.size]}  repeat: {args.repeat}")
    header = f"{'kernel':<18}{'numpy (us)':>12}{'numba (us)':>12}{'speedup':>9}"
    print(header)
    print("-" * len(header))
    for name, t_np, t_nb, ratio in run(args.repeat, args.size):
        if t_nb is None:
            print(f"{name:<18}{t_np * 1e6:>12.2f}{'n/a':>12}{'n/a':>9}")
        else:
            print(f"{name:<18}{t_np * 1e6:>12.2f}{t_nb * 1e6:>12.2f}{ratio:>8.2f}x")


if __name__ == "__main__":
    main()
