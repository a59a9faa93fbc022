"""Differentiable primitives recorded on the active tape.

Shapes are checked strictly.  The only implicit expansion is adding a bias
vector to every row of a matrix; anything else that does not line up raises
:class:`~sgrec.errors.ShapeError`.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, record

LOG_EPS = 1e-12


def _as_index(idx) -> np.ndarray:
    arr = np.asarray(idx)
    if arr.dtype.kind not in "iu":
        raise ShapeError(f"index array must be integral, got dtype {arr.dtype}")
    return arr.astype(np.int64, copy=False)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return record(out, (a, b), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        out = Tensor(a.data + b.data)
        return record(out, (a, b), lambda g: (g, g))
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        out = Tensor(a.data + b.data)
        return record(out, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} - {b.shape}")
    out = Tensor(a.data - b.data)
    return record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    out = Tensor(a.data * b.data)
    return record(out, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)
    return record(out, (x,), lambda g: (g * c,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    return record(out, (x,), lambda g: (g * (1.0 - y * y),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    pos = x.data >= 0
    out = Tensor(np.where(pos, x.data, slope * x.data))
    return record(out, (x,), lambda g: (np.where(pos, g, slope * g),))


def total(x: Tensor) -> Tensor:
    """Sum of every element, as a 0-d tensor."""
    out = Tensor(np.sum(x.data))
    return record(out, (x,), lambda g: (np.full_like(x.data, g),))


def mean(x: Tensor) -> Tensor:
    return scale(total(x), 1.0 / x.size)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return record(out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors:
        other = [d for i, d in enumerate(t.shape) if i != ax]
        ref = [d for i, d in enumerate(tensors[0].shape) if i != ax]
        if t.ndim != ndim or other != ref:
            raise ShapeError(
                f"concat shape mismatch along axis {axis}: {[t.shape for t in tensors]}"
            )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=ax))
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def grad_fn(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * ndim
            sl[ax] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return parts

    return record(out, tuple(tensors), grad_fn)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """``x[..., start:stop]``; the half-vector extraction used by write-back and the category head."""
    if not 0 <= start < stop <= x.shape[-1]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for shape {x.shape}")
    out = Tensor(x.data[..., start:stop])

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return record(out, (x,), grad_fn)


def row_gather(table: Tensor, idx) -> Tensor:
    """Embedding lookup.  Backward scatter-adds into the touched rows only."""
    idx = _as_index(idx)
    if idx.ndim != 1:
        raise ShapeError(f"row_gather expects a 1-d index array, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")
    out = Tensor(table.data[idx])

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return record(out, (table,), grad_fn)


def segment_sum(x: Tensor, segments, num_segments: int) -> Tensor:
    """Sum rows of ``x`` that share a segment id; the adjoint of :func:`row_gather`."""
    seg = _as_index(segments)
    if seg.shape != (x.shape[0],):
        raise ShapeError(f"segment ids shape {seg.shape} does not match rows of {x.shape}")
    buf = np.zeros((num_segments,) + x.shape[1:], dtype=x.dtype)
    np.add.at(buf, seg, x.data)
    out = Tensor(buf)
    return record(out, (x,), lambda g: (g[seg],))


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row ``i`` of a matrix by scalar ``w[i]``."""
    if x.ndim != 2 or w.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows shape mismatch: {x.shape} by {w.shape}")
    out = Tensor(x.data * w.data[:, None])

    def grad_fn(g):
        return g * w.data[:, None], np.sum(g * x.data, axis=1)

    return record(out, (x, w), grad_fn)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, with max subtraction."""
    if x.size == 0 or x.shape[-1] == 0:
        raise ValueError("softmax of an empty tensor")
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)
    out = Tensor(y)

    def grad_fn(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return record(out, (x,), grad_fn)


def segment_softmax(x: Tensor, segments, num_segments: int) -> Tensor:
    """Softmax of a 1-d score vector taken independently within each segment."""
    seg = _as_index(segments)
    if x.ndim != 1 or seg.shape != x.shape:
        raise ShapeError(f"segment_softmax expects matching 1-d inputs, got {x.shape} and {seg.shape}")
    if x.size == 0:
        raise ValueError("segment_softmax of an empty tensor")
    peak = np.full(num_segments, -np.inf, dtype=x.dtype)
    np.maximum.at(peak, seg, x.data)
    e = np.exp(x.data - peak[seg])
    denom = np.zeros(num_segments, dtype=x.dtype)
    np.add.at(denom, seg, e)
    y = e / denom[seg]
    out = Tensor(y)

    def grad_fn(g):
        dot = np.zeros(num_segments, dtype=x.dtype)
        np.add.at(dot, seg, g * y)
        return (y * (g - dot[seg]),)

    return record(out, (x,), grad_fn)


def log(x: Tensor, eps: float = LOG_EPS) -> Tensor:
    """``log(x + eps)``."""
    shifted = x.data + eps
    out = Tensor(np.log(shifted))
    return record(out, (x,), lambda g: (g / shifted,))


def pick(x: Tensor, targets) -> Tensor:
    """Select ``x[i, targets[i]]`` for every row (or ``x[target]`` for a vector)."""
    t = _as_index(targets)
    if x.ndim == 1:
        if t.ndim != 0:
            raise ShapeError("pick on a vector takes a single integer target")
        if not 0 <= int(t) < x.shape[0]:
            raise IndexError(f"target {int(t)} out of range for {x.shape[0]} classes")
        k = int(t)
        out = Tensor(x.data[k])

        def grad_vec(g):
            full = np.zeros_like(x.data)
            full[k] = g
            return (full,)

        return record(out, (x,), grad_vec)
    if x.ndim != 2 or t.shape != (x.shape[0],):
        raise ShapeError(f"pick shape mismatch: {x.shape} with targets {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= x.shape[1]):
        raise IndexError(f"target out of range for {x.shape[1]} classes")
    rows = np.arange(x.shape[0])
    out = Tensor(x.data[rows, t])

    def grad_mat(g):
        full = np.zeros_like(x.data)
        full[rows, t] = g
        return (full,)

    return record(out, (x,), grad_mat)


def cross_entropy(probabilities: Tensor, target, eps: float = LOG_EPS) -> Tensor:
    """Negative log-likelihood of ``target`` under a probability vector.

    For a batch of rows the per-row losses are averaged.
    """
    picked = pick(probabilities, target)
    nll = scale(log(picked, eps), -1.0)
    if nll.ndim == 0:
        return nll
    return mean(nll)


def l2_norm_sq(params: Iterable[Tensor]) -> Tensor:
    """Sum of squared entries over a set of tensors."""
    params = list(params)
    value = sum(float(np.sum(p.data.astype(np.float64) ** 2)) for p in params)
    dtype = params[0].dtype if params else np.float64
    out = Tensor(np.asarray(value, dtype=dtype))
    return record(out, tuple(params), lambda g: [2.0 * g * p.data for p in params])


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)
