"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small: a :class:`Value` wraps a numpy array,
remembers the Values it was computed from and a closure that pushes the
output gradient back into them. Besides the usual dense algebra it carries
the segment operations (per-neighbourhood sum/mean/max and softmax) that
message passing on graphs is written in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Value:
    """A node of the computation graph.

    ``data`` is always a float64 ndarray. ``grad`` is allocated on first
    accumulation and has the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Value, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(shape={self.shape})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _make(data: np.ndarray, parents: Sequence[Value], backward_fn) -> Value:
    out = Value(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Value) -> None:
    """Populate ``grad`` on every ancestor of a scalar ``loss`` that requires it."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# --------------------------------------------------------------------------
# elementwise algebra


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), bw)


def matmul(a: Value, b: Value) -> Value:
    """Matrix product; leading dimensions of ``a`` broadcast against ``b``."""
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    if a.ndim > 2 and b.ndim == 2:
        # one large GEMM is much faster than a stack of small ones
        flat = reshape(a, (-1, a.shape[-1]))
        return reshape(matmul(flat, b), a.shape[:-1] + (b.shape[1],))

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw)


def concat(values: Sequence[Value], axis: int = -1) -> Value:
    values = [as_value(v) for v in values]
    if len(values) == 1:
        return values[0]
    ref = values[0].shape
    ax = axis % len(ref)
    for v in values[1:]:
        if len(v.shape) != len(ref) or any(
            s != r for k, (s, r) in enumerate(zip(v.shape, ref)) if k != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {v.shape} on axis {axis}")
    sizes = [v.shape[ax] for v in values]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for v, lo, hi in zip(values, bounds[:-1], bounds[1:]):
            if v.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                v._accumulate(g[tuple(sl)])

    return _make(np.concatenate([v.data for v in values], axis=ax), values, bw)


def index(x: Value, key) -> Value:
    """Basic (slice) indexing. Use :func:`gather` for integer row selection."""

    def bw(g):
        full = np.zeros_like(x.data)
        full[key] = g
        x._accumulate(full)

    return _make(x.data[key], (x,), bw)


def reshape(x: Value, shape) -> Value:
    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), bw)


def transpose(x: Value, axes) -> Value:
    inverse = np.argsort(axes)

    def bw(g):
        x._accumulate(np.transpose(g, inverse))

    return _make(np.transpose(x.data, axes), (x,), bw)


def reduce_sum(x: Value, axis=None, keepdims: bool = False) -> Value:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def reduce_mean(x: Value, axis=None, keepdims: bool = False) -> Value:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(x.shape[a] for a in axes)
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / max(count, 1))


def exp(x: Value) -> Value:
    out = np.exp(x.data)

    def bw(g):
        x._accumulate(g * out)

    return _make(out, (x,), bw)


def log(x: Value) -> Value:
    def bw(g):
        x._accumulate(g / x.data)

    return _make(np.log(x.data), (x,), bw)


def sqrt(x: Value) -> Value:
    out = np.sqrt(x.data)

    def bw(g):
        x._accumulate(g * 0.5 / out)

    return _make(out, (x,), bw)


# --------------------------------------------------------------------------
# activations


def relu(x: Value) -> Value:
    mask = x.data > 0

    def bw(g):
        x._accumulate(g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), bw)


def leaky_relu(x: Value, slope: float = 0.2) -> Value:
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope)

    def bw(g):
        x._accumulate(g * scale)

    return _make(x.data * scale, (x,), bw)


def elu(x: Value, alpha: float = 1.0) -> Value:
    mask = x.data > 0
    neg = alpha * np.expm1(np.minimum(x.data, 0.0))
    out = np.where(mask, x.data, neg)

    def bw(g):
        x._accumulate(g * np.where(mask, 1.0, neg + alpha))

    return _make(out, (x,), bw)


def sigmoid(x: Value) -> Value:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bw(g):
        x._accumulate(g * out * (1.0 - out))

    return _make(out, (x,), bw)


def tanh(x: Value) -> Value:
    out = np.tanh(x.data)

    def bw(g):
        x._accumulate(g * (1.0 - out * out))

    return _make(out, (x,), bw)


ACTIVATIONS: dict[str, Callable[[Value], Value]] = {
    "relu": relu,
    "elu": elu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
}


def activation(x: Value, kind: str) -> Value:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# --------------------------------------------------------------------------
# normalisation, softmax, losses


def softmax(x: Value, axis: int = -1) -> Value:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (x,), bw)


def layer_norm(x: Value, gamma: Value, beta: Value, eps: float = 1e-5) -> Value:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = x.shape[-1]

    def bw(g):
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            x._accumulate(
                inv / d * (d * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
            )

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), bw)


def batch_norm(
    x: Value,
    gamma: Value,
    beta: Value,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Value:
    """Batch normalisation over rows of a 2-D input.

    In train mode the running buffers are updated in place with the batch
    statistics (unbiased variance, as is customary).
    """
    if not train:
        inv = 1.0 / np.sqrt(running_var + eps)
        scale = Value(inv)
        shift = Value(-running_mean * inv)
        return add(mul(add(mul(x, scale), shift), gamma), beta)

    n = x.shape[0]
    mu = x.data.mean(axis=0)
    xc = x.data - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    if n > 1:
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)

    def bw(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            x._accumulate(
                inv / n * (n * gx - gx.sum(0) - xhat * (gx * xhat).sum(0))
            )

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), bw)


def cross_entropy(logits: Value, gold) -> Value:
    """Mean negative log-likelihood of ``gold`` classes under ``softmax(logits)``."""
    gold = np.asarray(gold, dtype=np.int64)
    b, a = logits.shape
    if gold.shape != (b,):
        raise ShapeError(f"cross_entropy: gold shape {gold.shape} does not match batch {b}")
    if gold.size and (gold.min() < 0 or gold.max() >= a):
        raise IndexError(f"cross_entropy: gold index out of range for {a} classes")
    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(b)
    loss = -logp[rows, gold].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[rows, gold] -= 1.0
        logits._accumulate(grad * (g / b))

    return _make(np.asarray(loss), (logits,), bw)


def dropout(x: Value, rate: float, rng: np.random.Generator | None, train: bool) -> Value:
    """Inverted dropout; identity in eval mode or when ``rate`` is zero."""
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Value(keep))


# --------------------------------------------------------------------------
# gather / segment operations


def gather(x: Value, idx) -> Value:
    """Select rows ``x[idx]``; the gradient scatter-adds back into ``x``."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather: index out of range for {n} rows")

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accumulate(full)

    return _make(x.data[idx], (x,), bw)


def embedding_lookup(table: Value, ids) -> Value:
    return gather(table, ids)


@dataclass(frozen=True)
class SegmentIndex:
    """Maps every edge slot (row) to the segment (node) it is reduced into."""

    target_of: np.ndarray
    segment_count: int

    def __post_init__(self):
        t = np.asarray(self.target_of, dtype=np.int64)
        object.__setattr__(self, "target_of", t)
        if t.ndim != 1:
            raise ShapeError("SegmentIndex.target_of must be 1-D")
        if t.size and (t.min() < 0 or t.max() >= self.segment_count):
            raise IndexError(
                f"SegmentIndex: target index out of range for {self.segment_count} segments"
            )

    def counts(self) -> np.ndarray:
        return np.bincount(self.target_of, minlength=self.segment_count)


def _check_segments(x: Value, idx: SegmentIndex, name: str) -> None:
    if x.shape[0] != idx.target_of.shape[0]:
        raise ShapeError(
            f"{name}: {x.shape[0]} rows but index covers {idx.target_of.shape[0]} edges"
        )


def segment_reduce(messages: Value, idx: SegmentIndex, mode: str = "sum") -> Value:
    """Reduce message rows into their target segments.

    Empty segments produce a zero row for every mode. Rows are folded in
    ascending edge order, so results are reproducible bit for bit.
    """
    _check_segments(messages, idx, "segment_reduce")
    t = idx.target_of
    out_shape = (idx.segment_count,) + messages.shape[1:]
    if mode in ("sum", "mean"):
        out = np.zeros(out_shape)
        np.add.at(out, t, messages.data)
        if mode == "mean":
            counts = idx.counts().astype(DTYPE)
            scale = 1.0 / np.maximum(counts, 1.0)
            scale = scale.reshape((-1,) + (1,) * (messages.ndim - 1))
            out *= scale
        else:
            scale = None

        def bw(g):
            gg = g if scale is None else g * scale
            messages._accumulate(gg[t])

        return _make(out, (messages,), bw)

    if mode == "max":
        out = np.full(out_shape, -np.inf)
        np.maximum.at(out, t, messages.data)
        empty = idx.counts() == 0
        out[empty] = 0.0
        # route each gradient to the first edge (ascending order) attaining the max
        edge_no = np.arange(t.shape[0]).reshape((-1,) + (1,) * (messages.ndim - 1))
        candidate = np.where(messages.data == out[t], edge_no, t.shape[0])
        first = np.full(out_shape, t.shape[0])
        np.minimum.at(first, t, candidate)
        winner = edge_no == first[t]

        def bw(g):
            messages._accumulate(np.where(winner, g[t], 0.0))

        return _make(out, (messages,), bw)

    raise ValueError(f"unknown segment reduction {mode!r}")


def segment_softmax(scores: Value, idx: SegmentIndex) -> Value:
    """Softmax of ``scores`` taken separately within each segment.

    ``scores`` may carry trailing axes (e.g. attention heads); each is
    normalised independently.
    """
    _check_segments(scores, idx, "segment_softmax")
    t = idx.target_of
    seg_shape = (idx.segment_count,) + scores.shape[1:]
    smax = np.full(seg_shape, -np.inf)
    np.maximum.at(smax, t, scores.data)
    e = np.exp(scores.data - smax[t])
    denom = np.zeros(seg_shape)
    np.add.at(denom, t, e)
    out = e / denom[t]

    def bw(g):
        dot = np.zeros(seg_shape)
        np.add.at(dot, t, g * out)
        scores._accumulate(out * (g - dot[t]))

    return _make(out, (scores,), bw)


# --------------------------------------------------------------------------
# finite-difference checking


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    """``|a - n| / max(|a| + |n|, floor)``; the floor keeps near-zero entries from dominating."""
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)


def grad_check(
    f: Callable[[], Value],
    params: Iterable[Value],
    epsilon: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare backprop gradients of ``f()`` with central differences.

    ``f`` must rebuild the graph from the current contents of ``params`` on
    every call. When ``max_entries`` is given, at most that many coordinates
    per parameter are probed (chosen by ``rng``). Returns the largest
    relative error seen.
    """
    params = list(params)
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_entries, replace=False)
        num = np.empty(coords.size)
        for k, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + epsilon
            fp = float(f().data)
            flat[c] = orig - epsilon
            fm = float(f().data)
            flat[c] = orig
            num[k] = (fp - fm) / (2 * epsilon)
        err = relative_error(ga.reshape(-1)[coords], num)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
