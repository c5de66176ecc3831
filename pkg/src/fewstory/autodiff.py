"""Reverse-mode automatic differentiation over dense float64 tensors.

The engine supports differentiating through a previous backward pass:
``gradient(..., create_graph=True)`` records the gradient computation itself
on the tape, so a later ``gradient`` call can differentiate the returned
gradients.  That is what turns the second-order meta objective (a loss
evaluated at ``theta - alpha * dL/dtheta``, differentiated w.r.t. ``theta``)
into a plain composition instead of a special case.

Every backward formula is written in terms of the same primitives, which
keeps the operation set closed under differentiation: the adjoint of each op
is again expressible on the tape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import kernels as _K


class GradientError(ValueError):
    """Malformed gradient request: non-scalar loss or a parameter off the tape."""


class GraphConsumedError(RuntimeError):
    """Backward reached a node already freed by a previous non-retaining pass."""


_STATE = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = is_grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


@contextmanager
def _keep_mode():
    yield


class _Node:
    __slots__ = ("parents", "backward_fn", "consumed")

    def __init__(self, parents, backward_fn):
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """Dense float64 array plus an optional tape node.

    Public construction validates finiteness; results of tape operations are
    attached internally without re-validation (overflow mid-computation is a
    divergence signal handled by callers, not a construction error).
    """

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor rejects non-finite input")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = None

    # -- introspection -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        out = _result(self.data, (), None)
        return out

    def copy(self) -> "Tensor":
        t = _result(self.data.copy(), (), None)
        t.requires_grad = self.requires_grad
        return t

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, n):
        return power(self, n)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return tsum(self) * (1.0 / self.data.size)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(x, dtype=np.float64)
    t.requires_grad = False
    t.node = None
    return t


def _result(data, parents, backward_fn) -> Tensor:
    """Attach an op result to the tape when recording is on and needed."""
    t = Tensor.__new__(Tensor)
    t.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
    t.node = None
    t.requires_grad = False
    if backward_fn is not None and is_grad_enabled():
        if any(p.requires_grad for p in parents):
            t.requires_grad = True
            t.node = _Node(tuple(parents), backward_fn)
    return t


# ---------------------------------------------------------------------------
# Backward driver
# ---------------------------------------------------------------------------


def gradient(loss: Tensor, params, create_graph: bool = False,
             retain_graph=None, allow_unused: bool = False):
    """Gradients of a scalar ``loss`` w.r.t. each tensor in ``params``.

    With ``create_graph`` the returned gradients carry tape nodes and can be
    differentiated again.  ``retain_graph`` defaults to ``create_graph``;
    without it the traversed nodes are marked consumed and a second backward
    through them raises ``GraphConsumedError``.  Parameters unreachable from
    the loss raise ``GradientError`` unless ``allow_unused`` maps them to
    zero gradients.
    """
    if not isinstance(loss, Tensor):
        raise GradientError("loss must be a Tensor")
    if loss.data.size != 1:
        raise GradientError(f"loss must be scalar, got shape {loss.data.shape}")
    if retain_graph is None:
        retain_graph = create_graph
    params = list(params)

    topo = []
    seen = set()
    reachable = {id(loss)}
    stack = [(loss, False)]
    while stack:
        t, processed = stack.pop()
        if processed:
            topo.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.node is None:
            continue
        if t.node.consumed:
            raise GraphConsumedError(
                "graph already consumed by a backward pass without retain_graph")
        stack.append((t, True))
        for p in t.node.parents:
            reachable.add(id(p))
            if p.node is not None and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): _wrap(np.ones_like(loss.data))}
    mode = _keep_mode() if create_graph else no_grad()
    with mode:
        for t in reversed(topo):
            g = grads.get(id(t))
            if g is None:
                continue
            parent_grads = t.node.backward_fn(g)
            for p, pg in zip(t.node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.data.shape != p.data.shape:
                    raise GradientError(
                        f"internal: gradient shape {pg.data.shape} != "
                        f"parameter shape {p.data.shape}")
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg

    if not retain_graph:
        for t in topo:
            t.node.consumed = True

    out = []
    for i, p in enumerate(params):
        g = grads.get(id(p))
        if g is None:
            if id(p) not in reachable and not allow_unused:
                raise GradientError(f"params[{i}] does not participate in the loss")
            g = _wrap(np.zeros_like(p.data))
        out.append(g)
    return out


# ---------------------------------------------------------------------------
# Elementwise and shape primitives
# ---------------------------------------------------------------------------


def _sum_to(g: Tensor, shape) -> Tensor:
    """Reduce a broadcast gradient back down to ``shape`` (differentiably)."""
    shape = tuple(shape)
    if g.data.shape == shape:
        return g
    while g.data.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.data.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        ga = _sum_to(g, a.data.shape) if a.requires_grad else None
        gb = _sum_to(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        ga = _sum_to(g, a.data.shape) if a.requires_grad else None
        gb = _sum_to(-g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        ga = _sum_to(g * b, a.data.shape) if a.requires_grad else None
        gb = _sum_to(g * a, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        ga = _sum_to(g / b, a.data.shape) if a.requires_grad else None
        gb = _sum_to(-(g * a) / (b * b), b.data.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data / b.data, (a, b), bw)


def neg(a):
    a = _wrap(a)

    def bw(g):
        return (-g,)

    return _result(-a.data, (a,), bw)


def power(a, n):
    a = _wrap(a)
    n = float(n)

    def bw(g):
        return (g * (n * power(a, n - 1.0)),)

    return _result(a.data ** n, (a,), bw)


def exp(a):
    a = _wrap(a)

    def bw(g):
        return (g * out,)

    out = _result(np.exp(a.data), (a,), bw)
    return out


def log(a):
    a = _wrap(a)

    def bw(g):
        return (g / a,)

    return _result(np.log(a.data), (a,), bw)


def sigmoid(a):
    a = _wrap(a)

    def bw(g):
        return (g * (out * (1.0 - out)),)

    # .reshape: numba kernels flatten 0-d inputs to shape (1,)
    out = _result(_K.sigmoid(np.ascontiguousarray(a.data)).reshape(a.data.shape),
                  (a,), bw)
    return out


def tanh(a):
    a = _wrap(a)

    def bw(g):
        return (g * (1.0 - out * out),)

    out = _result(_K.tanh(np.ascontiguousarray(a.data)).reshape(a.data.shape),
                  (a,), bw)
    return out


def tsum(a, axis=None, keepdims: bool = False):
    a = _wrap(a)
    if axis is not None:
        axis = axis % a.data.ndim

    def bw(g):
        gg = g
        if axis is not None and not keepdims:
            shape = list(a.data.shape)
            shape[axis] = 1
            gg = reshape(gg, tuple(shape))
        return (gg * _wrap(np.ones_like(a.data)),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def reshape(a, shape):
    a = _wrap(a)
    shape = tuple(int(s) for s in shape)

    def bw(g):
        return (reshape(g, a.data.shape),)

    return _result(a.data.reshape(shape), (a,), bw)


def transpose(a):
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a rank-2 tensor")

    def bw(g):
        return (transpose(g),)

    return _result(a.data.T.copy(), (a,), bw)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.data.shape} @ {b.data.shape}")

    def bw(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw)


def concat(tensors, axis: int = 0):
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ValueError("concat of an empty list")
    axis = axis % ts[0].data.ndim
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def bw(g):
        return tuple(
            narrow(g, axis, int(offsets[i]), sizes[i]) if t.requires_grad else None
            for i, t in enumerate(ts))

    return _result(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)


def narrow(a, axis: int, start: int, length: int):
    """Contiguous slice of ``length`` entries along ``axis`` starting at ``start``."""
    a = _wrap(a)
    axis = axis % a.data.ndim
    if start < 0 or start + length > a.data.shape[axis]:
        raise ValueError("narrow out of bounds")

    def bw(g):
        parts = []
        before = list(a.data.shape)
        before[axis] = start
        after = list(a.data.shape)
        after[axis] = a.data.shape[axis] - start - length
        if before[axis] > 0:
            parts.append(_wrap(np.zeros(before)))
        parts.append(g)
        if after[axis] > 0:
            parts.append(_wrap(np.zeros(after)))
        return (concat(parts, axis=axis) if len(parts) > 1 else g,)

    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    return _result(np.ascontiguousarray(a.data[tuple(index)]), (a,), bw)


# ---------------------------------------------------------------------------
# Row/column indexing primitives (embedding lookup, target picking)
# ---------------------------------------------------------------------------


def take_rows(a, idx):
    """Rows ``a[idx]`` of a rank-2 tensor; duplicate indices allowed."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2 or idx.ndim != 1:
        raise ValueError("take_rows expects rank-2 data and rank-1 indices")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError("row index out of range")

    def bw(g):
        return (scatter_rows(g, idx, a.data.shape[0]),)

    return _result(a.data[idx], (a,), bw)


def scatter_rows(values, idx, nrows: int):
    """Accumulate rank-2 ``values`` rows into a fresh [nrows, D] at ``idx``."""
    values = _wrap(values)
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        return (take_rows(g, idx),)

    data = _K.scatter_add_rows(np.ascontiguousarray(values.data), idx, nrows)
    return _result(data, (values,), bw)


def pick_cols(a, idx):
    """Vector a[i, idx[i]] for each row i of a rank-2 tensor."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.int64)
    n, m = a.data.shape
    if idx.shape != (n,):
        raise ValueError("pick_cols expects one column index per row")
    if idx.size and (idx.min() < 0 or idx.max() >= m):
        raise IndexError("column index out of range")

    def bw(g):
        return (put_cols(g, idx, m),)

    return _result(a.data[np.arange(n), idx], (a,), bw)


def put_cols(values, idx, ncols: int):
    """Adjoint of pick_cols: rank-1 values placed at (i, idx[i]) in [n, ncols]."""
    values = _wrap(values)
    idx = np.asarray(idx, dtype=np.int64)
    n = values.data.shape[0]

    def bw(g):
        return (pick_cols(g, idx),)

    data = np.zeros((n, ncols))
    data[np.arange(n), idx] = values.data
    return _result(data, (values,), bw)


# ---------------------------------------------------------------------------
# Softmax family
# ---------------------------------------------------------------------------


def softmax_rows(x):
    """Row-wise softmax of a rank-2 tensor, max-subtracted for stability."""
    x = _wrap(x)
    if x.data.ndim != 2:
        raise ValueError("softmax_rows expects a rank-2 tensor")

    def bw(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((g - dot) * out,)

    out = _result(_K.softmax_rows(np.ascontiguousarray(x.data)), (x,), bw)
    return out


def logsumexp_rows(x):
    """Row-wise log-sum-exp of a rank-2 tensor -> rank-1."""
    x = _wrap(x)
    if x.data.ndim != 2:
        raise ValueError("logsumexp_rows expects a rank-2 tensor")
    n = x.data.shape[0]

    def bw(g):
        return (reshape(g, (n, 1)) * softmax_rows(x),)

    return _result(_K.logsumexp_rows(np.ascontiguousarray(x.data)), (x,), bw)


# ---------------------------------------------------------------------------
# Batched attention primitives (mutually adjoint triple)
# ---------------------------------------------------------------------------


def att_scores(states, query):
    """Dot products: states [B,L,H] x query [B,H] -> scores [B,L]."""
    states, query = _wrap(states), _wrap(query)

    def bw(g):
        gs = att_outer(g, query) if states.requires_grad else None
        gq = att_apply(g, states) if query.requires_grad else None
        return gs, gq

    data = _K.att_scores(np.ascontiguousarray(states.data),
                         np.ascontiguousarray(query.data))
    return _result(data, (states, query), bw)


def att_apply(weights, states):
    """Weighted sum: weights [B,L] x states [B,L,H] -> [B,H]."""
    weights, states = _wrap(weights), _wrap(states)

    def bw(g):
        gw = att_scores(states, g) if weights.requires_grad else None
        gs = att_outer(weights, g) if states.requires_grad else None
        return gw, gs

    data = _K.att_apply(np.ascontiguousarray(weights.data),
                        np.ascontiguousarray(states.data))
    return _result(data, (weights, states), bw)


def att_outer(weights, query):
    """Outer product per batch row: [B,L] x [B,H] -> [B,L,H]."""
    weights, query = _wrap(weights), _wrap(query)

    def bw(g):
        gw = att_scores(g, query) if weights.requires_grad else None
        gq = att_apply(weights, g) if query.requires_grad else None
        return gw, gq

    data = _K.att_outer(np.ascontiguousarray(weights.data),
                        np.ascontiguousarray(query.data))
    return _result(data, (weights, query), bw)


# ---------------------------------------------------------------------------
# Model-facing composites
# ---------------------------------------------------------------------------


def cross_entropy(logits, targets):
    """Sum over steps of -log softmax(logits)[target].

    logits: [steps, vocab]; targets: integer ids, one per step.
    """
    logits = _wrap(logits)
    idx = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ValueError("cross_entropy expects rank-2 logits")
    steps, vocab = logits.data.shape
    if idx.shape != (steps,):
        raise ValueError("cross_entropy expects one target per step")
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise IndexError("target id out of range")
    return (logsumexp_rows(logits) - pick_cols(logits, idx)).sum()


@dataclass
class GRUParams:
    """Gate weights for one GRU cell, row-vector convention y = x @ W + b."""

    wz: Tensor
    bz: Tensor
    wr: Tensor
    br: Tensor
    wh: Tensor
    bh: Tensor

    FIELDS = ("wz", "bz", "wr", "br", "wh", "bh")

    @classmethod
    def create(cls, input_dim: int, hidden: int, rng=None, scale: float = 0.1):
        def w(shape):
            if rng is None:
                return Tensor(np.zeros(shape), requires_grad=True)
            return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)

        full = input_dim + hidden
        return cls(wz=w((full, hidden)), bz=w((hidden,)),
                   wr=w((full, hidden)), br=w((hidden,)),
                   wh=w((full, hidden)), bh=w((hidden,)))

    def named(self, prefix: str):
        for f in self.FIELDS:
            yield f"{prefix}.{f}", getattr(self, f)


def gru_cell(params: GRUParams, h_prev, x):
    """One GRU step.

    z = sigmoid(W_z [x; h] + b_z), r = sigmoid(W_r [x; h] + b_r),
    hbar = tanh(W_h [x; r*h] + b_h), h_next = (1 - z) * h + z * hbar.
    Accepts [B, H] batches or single [H] vectors.
    """
    h_prev, x = _wrap(h_prev), _wrap(x)
    single = h_prev.data.ndim == 1
    if single:
        h_prev = reshape(h_prev, (1, h_prev.data.shape[0]))
        x = reshape(x, (1, x.data.shape[0]))
    hidden = params.wz.data.shape[1]
    if h_prev.data.shape[1] != hidden or \
            x.data.shape[1] + hidden != params.wz.data.shape[0]:
        raise ValueError(
            f"gru_cell dimension mismatch: x {x.data.shape}, h {h_prev.data.shape}, "
            f"W {params.wz.data.shape}")
    xh = concat([x, h_prev], axis=1)
    z = sigmoid(xh @ params.wz + params.bz)
    r = sigmoid(xh @ params.wr + params.br)
    xrh = concat([x, r * h_prev], axis=1)
    hbar = tanh(xrh @ params.wh + params.bh)
    h_next = (1.0 - z) * h_prev + z * hbar
    if single:
        h_next = reshape(h_next, (hidden,))
    return h_next


def dropout(x, rate: float, rng):
    """Inverted dropout with a tape-recorded constant mask."""
    if rate <= 0.0:
        return x
    x = _wrap(x)
    keep = 1.0 - rate
    mask = (rng.random(x.data.shape) < keep).astype(np.float64) / keep
    return x * _wrap(mask)
