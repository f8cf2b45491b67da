"""Tape-based reverse-mode automatic differentiation over dense numpy buffers.

Design notes:
  * A ``Tensor`` wraps a numpy array. Ops executed while a ``Tape`` is active
    append result nodes to the tape; ``Tape.backward`` walks the node list in
    reverse insertion order exactly once, so gradients are deterministic.
  * Elementwise binary ops require identical shapes or a python/0-d scalar on
    one side; there is no general broadcasting. Row broadcasting, where a model
    needs it, is expressed with an explicit ones-matmul.
  * Every op checks its output for non-finite values and raises immediately,
    which keeps failures close to their cause during training.
"""

from __future__ import annotations

import numbers
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class DiffError(Exception):
    pass


class ShapeError(DiffError):
    pass


class NonFiniteError(DiffError):
    pass


_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Append-only record of op nodes for one forward/backward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def backward(self, root: "Tensor") -> None:
        """Accumulate d(root)/d(x) into ``.grad`` of every tensor reachable
        from the tape. Root must be scalar."""
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
        for node in self.nodes:
            node.grad = None
            for p in node._parents:
                p.grad = None
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)


class Tensor:
    """Dense numeric buffer, optionally a recorded node on the active tape."""

    __slots__ = ("data", "grad", "_parents", "_backward", "op", "node_id")

    def __init__(self, data, dtype=None):
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op: str = "leaf"
        self.node_id: int = -1

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_const_like(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __float__(self):
        return self.item()


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _const_like(x, ref: Tensor) -> Tensor:
    arr = np.asarray(x, dtype=ref.data.dtype)
    if arr.shape not in ((), ref.data.shape):
        arr = np.broadcast_to(arr, ref.data.shape).copy()
    return Tensor(arr)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data: np.ndarray, parents: tuple, backward: Callable | None, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    tape = active_tape()
    if tape is not None:
        out._parents = parents
        out._backward = backward
        out.node_id = len(tape.nodes)
        tape.nodes.append(out)
    else:
        out._parents = ()
        out._backward = None
        out.node_id = -1
    return out


def _binary_prep(a, b, op: str):
    a = as_tensor(a)
    b = as_tensor(b) if not isinstance(b, numbers.Number) else Tensor(np.asarray(b, dtype=a.data.dtype))
    if a.data.shape != b.data.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"op '{op}': shape mismatch {a.data.shape} vs {b.data.shape}")
    return a, b


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    # scalar operand of an elementwise op: sum the incoming gradient
    if shape == ():
        return np.asarray(g.sum())
    return g


def add(a, b) -> Tensor:
    a, b = _binary_prep(a, b, "add")
    data = a.data + b.data

    def backward(g):
        _accum(a, _reduce_to(g, a.data.shape))
        _accum(b, _reduce_to(g, b.data.shape))

    return _make(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_prep(a, b, "sub")
    data = a.data - b.data

    def backward(g):
        _accum(a, _reduce_to(g, a.data.shape))
        _accum(b, _reduce_to(-g, b.data.shape))

    return _make(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_prep(a, b, "mul")
    data = a.data * b.data

    def backward(g):
        _accum(a, _reduce_to(g * b.data, a.data.shape))
        _accum(b, _reduce_to(g * a.data, b.data.shape))

    return _make(data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_prep(a, b, "div")
    data = a.data / b.data

    def backward(g):
        _accum(a, _reduce_to(g / b.data, a.data.shape))
        _accum(b, _reduce_to(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward, "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"op 'matmul': incompatible shapes {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(data, (a, b), backward, "matmul")


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    return _make(data, tuple(parts), backward, "concat")


def gather(t, indices, axis: int = 0) -> Tensor:
    """Select slices along ``axis`` by integer index array."""
    t = as_tensor(t)
    indices = np.asarray(indices, dtype=np.intp)
    data = np.take(t.data, indices, axis=axis)
    ax = axis % t.data.ndim

    def backward(g):
        full = np.zeros_like(t.data)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, indices.ravel(), np.moveaxis(g, ax, 0).reshape((indices.size,) + moved.shape[1:]))
        _accum(t, full)

    return _make(data, (t,), backward, "gather")


def slice_cols(t, lo: int, hi: int) -> Tensor:
    """Contiguous column slice of a 2-D tensor."""
    t = as_tensor(t)
    if t.data.ndim != 2:
        raise ShapeError(f"op 'slice_cols': expected 2-D, got {t.data.shape}")
    data = t.data[:, lo:hi].copy()

    def backward(g):
        full = np.zeros_like(t.data)
        full[:, lo:hi] = g
        _accum(t, full)

    return _make(data, (t,), backward, "slice_cols")


def reshape(t, shape) -> Tensor:
    t = as_tensor(t)
    data = t.data.reshape(shape)

    def backward(g):
        _accum(t, g.reshape(t.data.shape))

    return _make(data, (t,), backward, "reshape")


def _unary(t, fn, dfn, op):
    t = as_tensor(t)
    data = fn(t.data)

    def backward(g):
        _accum(t, g * dfn(t.data, data))

    return _make(data, (t,), backward, op)


def relu(t) -> Tensor:
    return _unary(t, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0.0).astype(x.dtype), "relu")


def tanh(t) -> Tensor:
    return _unary(t, np.tanh, lambda x, y: 1.0 - y * y, "tanh")


def sigmoid(t) -> Tensor:
    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary(t, fwd, lambda x, y: y * (1.0 - y), "sigmoid")


def exp(t) -> Tensor:
    return _unary(t, np.exp, lambda x, y: y, "exp")


def log(t) -> Tensor:
    return _unary(t, np.log, lambda x, y: 1.0 / x, "log")


def square(t) -> Tensor:
    return _unary(t, np.square, lambda x, y: 2.0 * x, "square")


def sqrt(t) -> Tensor:
    return _unary(t, np.sqrt, lambda x, y: 0.5 / y, "sqrt")


def clamp(t, lo: float, hi: float) -> Tensor:
    # gradient 1 inside the bounds, 0 outside
    return _unary(
        t,
        lambda x: np.clip(x, lo, hi),
        lambda x, y: ((x >= lo) & (x <= hi)).astype(x.dtype),
        "clamp",
    )


def reduce_sum(t, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    data = np.asarray(t.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            _accum(t, np.broadcast_to(g, t.data.shape).copy() if np.ndim(g) == 0 else np.full_like(t.data, g))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(t, np.broadcast_to(gg, t.data.shape).copy())

    return _make(data, (t,), backward, "reduce_sum")


def reduce_max_over_set(t, axis: int = 0) -> Tensor:
    """Max along ``axis``; backward routes gradient only to the first
    (lowest-index) argmax element of each reduced group."""
    t = as_tensor(t)
    amax = np.argmax(t.data, axis=axis)
    data = np.take_along_axis(t.data, np.expand_dims(amax, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(t.data)
        np.put_along_axis(full, np.expand_dims(amax, axis), np.expand_dims(g, axis), axis=axis)
        _accum(t, full)

    return _make(data, (t,), backward, "reduce_max_over_set")


def logsumexp(t, axis: int = -1, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    m = t.data.max(axis=axis, keepdims=True)
    ex = np.exp(t.data - m)
    s = ex.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = ex / s
    data = out if keepdims else np.squeeze(out, axis=axis)

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        _accum(t, gg * soft)

    return _make(data, (t,), backward, "logsumexp")


def softmax(t, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    m = t.data.max(axis=axis, keepdims=True)
    ex = np.exp(t.data - m)
    data = ex / ex.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(t, data * (g - dot))

    return _make(data, (t,), backward, "softmax")


def scatter_max_pool(points, cell_ids: np.ndarray, num_cells: int) -> Tensor:
    """Per-cell columnwise max of point rows; empty cells are zero.

    ``points`` is (N, E); ``cell_ids`` an intp array of length N. Ties go to
    the lowest original row index (stable sort keeps insertion order).
    """
    points = as_tensor(points)
    n, e = points.data.shape
    cell_ids = np.asarray(cell_ids, dtype=np.intp)
    order = np.argsort(cell_ids, kind="stable")
    data = np.zeros((num_cells, e), dtype=points.data.dtype)
    src_idx = np.full((num_cells, e), -1, dtype=np.intp)
    if n:
        sorted_ids = cell_ids[order]
        sorted_pts = points.data[order]
        bounds = np.flatnonzero(np.diff(sorted_ids)) + 1
        starts = np.concatenate(([0], bounds))
        seg_cells = sorted_ids[starts]
        seg_of_row = np.repeat(np.arange(starts.size), np.diff(np.concatenate((starts, [n]))))
        maxv = np.maximum.reduceat(sorted_pts, starts, axis=0)
        # First (lowest original row; stable sort preserves insertion order
        # within a cell) sorted position attaining the columnwise max.
        cand = np.where(sorted_pts == maxv[seg_of_row], np.arange(n)[:, None], n)
        first = np.minimum.reduceat(cand, starts, axis=0)
        data[seg_cells] = maxv
        src_idx[seg_cells] = order[first]

    def backward(g):
        full = np.zeros_like(points.data)
        occupied = src_idx[:, 0] >= 0
        rows = src_idx[occupied]
        np.add.at(full, (rows, np.arange(e)[None, :].repeat(rows.shape[0], 0)), g[occupied])
        _accum(points, full)

    return _make(data, (points,), backward, "scatter_max_pool")


def conv2d(x, w, b) -> Tensor:
    """2-D convolution, stride 1, same (zero) padding.

    x: (H, W, Cin); w: (kh, kw, Cin, Cout); b: (Cout,).
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    h, wd, cin = x.data.shape
    kh, kw, cin2, cout = w.data.shape
    if cin != cin2:
        raise ShapeError(f"op 'conv2d': channels {cin} vs weight {cin2}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    patches = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    # patches: (H, W, Cin, kh, kw) -> (H*W, kh*kw*Cin)
    cols = patches.transpose(0, 1, 3, 4, 2).reshape(h * wd, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    data = (cols @ wmat + b.data).reshape(h, wd, cout)

    def backward(g):
        g2 = g.reshape(h * wd, cout)
        _accum(w, (cols.T @ g2).reshape(w.data.shape))
        _accum(b, g2.sum(axis=0))
        dcols = (g2 @ wmat.T).reshape(h, wd, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[i : i + h, j : j + wd, :] += dcols[:, :, i, j, :]
        _accum(x, dxp[ph : ph + h, pw : pw + wd, :])

    return _make(data, (x, w, b), backward, "conv2d")


OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "concat": concat,
    "gather": gather,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "square": square,
    "sqrt": sqrt,
    "reduce_sum": reduce_sum,
    "reduce_max_over_set": reduce_max_over_set,
    "softmax": softmax,
    "logsumexp": logsumexp,
}


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    if op not in OPS:
        raise DiffError(f"unknown op '{op}'")
    return OPS[op](*inputs, **kwargs)


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |a - n| / max(1e-8, |a| + |n|).
    """
    x = np.asarray(x, dtype=np.float64)
    leaf = Tensor(x.copy())
    with Tape() as tape:
        out = f(leaf)
        tape.backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x.copy())).data)
        flat[i] = orig - h
        fm = float(f(Tensor(x.copy())).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
