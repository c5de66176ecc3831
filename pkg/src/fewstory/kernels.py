"""Numeric kernels backing the autodiff primitives.

Every kernel exists in two interchangeable flavours: a pure-numpy version and
a numba ``@njit`` version that fuses the inner loops.  The active backend is
chosen once at import time from the ``FEWSTORY_KERNELS`` environment variable:

    FEWSTORY_KERNELS=auto     use numba when importable, else numpy (default)
    FEWSTORY_KERNELS=numba    require numba, fail loudly if missing
    FEWSTORY_KERNELS=numpy    force the pure-numpy fallback

Both tables stay importable regardless of the flag so that
``python -m fewstory.bench`` can time them side by side.  All kernels take
and return C-contiguous float64 arrays.
"""

from __future__ import annotations

import os

import numpy as np

# ---------------------------------------------------------------------------
# Loop bodies.  Written in the numba-compilable subset of Python/numpy; the
# numpy table wraps vectorized equivalents instead where those are faster.
# ---------------------------------------------------------------------------


def _sigmoid_loop(x):
    flat = x.ravel()
    out = np.empty(flat.size, dtype=np.float64)
    for i in range(flat.size):
        v = flat[i]
        if v >= 0.0:
            out[i] = 1.0 / (1.0 + np.exp(-v))
        else:
            e = np.exp(v)
            out[i] = e / (1.0 + e)
    return out.reshape(x.shape)


def _tanh_loop(x):
    flat = x.ravel()
    out = np.empty(flat.size, dtype=np.float64)
    for i in range(flat.size):
        out[i] = np.tanh(flat[i])
    return out.reshape(x.shape)


def _softmax_rows_loop(x):
    n, m = x.shape
    out = np.empty((n, m), dtype=np.float64)
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            e = np.exp(x[i, j] - mx)
            out[i, j] = e
            s += e
        for j in range(m):
            out[i, j] /= s
    return out


def _logsumexp_rows_loop(x):
    n, m = x.shape
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            s += np.exp(x[i, j] - mx)
        out[i] = mx + np.log(s)
    return out


def _att_scores_loop(states, query):
    # states [B, L, H], query [B, H] -> [B, L]
    b, l, h = states.shape
    out = np.zeros((b, l), dtype=np.float64)
    for i in range(b):
        for j in range(l):
            acc = 0.0
            for k in range(h):
                acc += states[i, j, k] * query[i, k]
            out[i, j] = acc
    return out


def _att_apply_loop(weights, states):
    # weights [B, L], states [B, L, H] -> [B, H]
    b, l, h = states.shape
    out = np.zeros((b, h), dtype=np.float64)
    for i in range(b):
        for j in range(l):
            w = weights[i, j]
            for k in range(h):
                out[i, k] += w * states[i, j, k]
    return out


def _att_outer_loop(weights, query):
    # weights [B, L], query [B, H] -> [B, L, H]
    b, l = weights.shape
    h = query.shape[1]
    out = np.empty((b, l, h), dtype=np.float64)
    for i in range(b):
        for j in range(l):
            w = weights[i, j]
            for k in range(h):
                out[i, j, k] = w * query[i, k]
    return out


def _scatter_add_rows_loop(values, index, nrows):
    # values [K, D] accumulated into a fresh [nrows, D] at rows index[k]
    k, d = values.shape
    out = np.zeros((nrows, d), dtype=np.float64)
    for i in range(k):
        r = index[i]
        for j in range(d):
            out[r, j] += values[i, j]
    return out


# ---------------------------------------------------------------------------
# Numpy flavours
# ---------------------------------------------------------------------------


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softmax_rows_np(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _logsumexp_rows_np(x):
    m = x.max(axis=1)
    return m + np.log(np.exp(x - m[:, None]).sum(axis=1))


def _att_scores_np(states, query):
    return np.einsum("blh,bh->bl", states, query)


def _att_apply_np(weights, states):
    return np.einsum("bl,blh->bh", weights, states)


def _att_outer_np(weights, query):
    return np.einsum("bl,bh->blh", weights, query)


def _scatter_add_rows_np(values, index, nrows):
    out = np.zeros((nrows, values.shape[1]), dtype=np.float64)
    np.add.at(out, index, values)
    return out


def numpy_table():
    """Kernel table for the pure-numpy backend."""
    return {
        "sigmoid": _sigmoid_np,
        "tanh": np.tanh,
        "softmax_rows": _softmax_rows_np,
        "logsumexp_rows": _logsumexp_rows_np,
        "att_scores": _att_scores_np,
        "att_apply": _att_apply_np,
        "att_outer": _att_outer_np,
        "scatter_add_rows": _scatter_add_rows_np,
    }


_numba_cache = None


def numba_table():
    """Kernel table with every loop body compiled by numba (built lazily)."""
    global _numba_cache
    if _numba_cache is None:
        from numba import njit

        jit = lambda f: njit(cache=True)(f)  # noqa: E731
        _numba_cache = {
            "sigmoid": jit(_sigmoid_loop),
            "tanh": jit(_tanh_loop),
            "softmax_rows": jit(_softmax_rows_loop),
            "logsumexp_rows": jit(_logsumexp_rows_loop),
            "att_scores": jit(_att_scores_loop),
            "att_apply": jit(_att_apply_loop),
            "att_outer": jit(_att_outer_loop),
            "scatter_add_rows": jit(_scatter_add_rows_loop),
        }
    return _numba_cache


def _select_backend():
    choice = os.environ.get("FEWSTORY_KERNELS", "auto").lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(
            f"FEWSTORY_KERNELS must be auto|numba|numpy, got {choice!r}"
        )
    if choice == "numpy":
        return "numpy", numpy_table()
    try:
        table = numba_table()
    except ImportError:
        if choice == "numba":
            raise
        return "numpy", numpy_table()
    return "numba", table


BACKEND, _TABLE = _select_backend()

sigmoid = _TABLE["sigmoid"]
tanh = _TABLE["tanh"]
softmax_rows = _TABLE["softmax_rows"]
logsumexp_rows = _TABLE["logsumexp_rows"]
att_scores = _TABLE["att_scores"]
att_apply = _TABLE["att_apply"]
att_outer = _TABLE["att_outer"]
scatter_add_rows = _TABLE["scatter_add_rows"]
