"""Reverse-mode differentiation over float64 numpy arrays.

Each :class:`DiffValue` records its parents and a closure that pushes the
output gradient back into them.  ``backward`` walks the graph in reverse
topological order.  Everything runs in double precision.
"""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Inputs to an op have incompatible shapes."""


class NonFiniteError(ValueError):
    """An op received or produced NaN/Inf."""


_ids = itertools.count()


class DiffValue:
    __slots__ = ("data", "grad", "node_id", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: Sequence["DiffValue"] = (), _backward: Callable[[], None] | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in {name or 'DiffValue'}")
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.node_id = next(_ids)
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = tuple(_parents)
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"DiffValue(shape={self.shape}, name={self.name!r})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError("backward() needs a scalar root")
        order: list[DiffValue] = []
        seen: set[int] = set()
        stack: list[tuple[DiffValue, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.node_id not in seen and p.requires_grad:
                    stack.append((p, False))
        for node in order:
            if node._parents:
                node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return mul(self, 1.0 / other) if not isinstance(other, DiffValue) else div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_value(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else DiffValue(x)


def constant(x) -> DiffValue:
    return DiffValue(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: DiffValue, b: DiffValue, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


def _node(data, parents, backward_factory) -> DiffValue:
    out = DiffValue(data, _parents=parents)
    if out.requires_grad:
        out._backward = backward_factory(out)
    return out


# ---------------------------------------------------------------- elementwise

def add(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b, "add")

    def factory(out):
        def _backward():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad, a.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(out.grad, b.shape)
        return _backward

    return _node(a.data + b.data, (a, b), factory)


def sub(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b, "sub")

    def factory(out):
        def _backward():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad, a.shape)
            if b.requires_grad:
                b.grad -= _unbroadcast(out.grad, b.shape)
        return _backward

    return _node(a.data - b.data, (a, b), factory)


def mul(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b, "mul")

    def factory(out):
        def _backward():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad * b.data, a.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(out.grad * a.data, b.shape)
        return _backward

    return _node(a.data * b.data, (a, b), factory)


def div(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b, "div")

    def factory(out):
        def _backward():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad / b.data, a.shape)
            if b.requires_grad:
                b.grad -= _unbroadcast(out.grad * a.data / b.data ** 2, b.shape)
        return _backward

    return _node(a.data / b.data, (a, b), factory)


def exp(x) -> DiffValue:
    x = as_value(x)

    def factory(out):
        def _backward():
            x.grad += out.grad * out.data
        return _backward

    return _node(np.exp(x.data), (x,), factory)


def log(x) -> DiffValue:
    x = as_value(x)
    if (x.data <= 0).any():
        raise NonFiniteError("log of non-positive value")

    def factory(out):
        def _backward():
            x.grad += out.grad / x.data
        return _backward

    return _node(np.log(x.data), (x,), factory)


def sqrt(x) -> DiffValue:
    x = as_value(x)

    def factory(out):
        def _backward():
            x.grad += out.grad * 0.5 / out.data
        return _backward

    return _node(np.sqrt(x.data), (x,), factory)


def relu(x) -> DiffValue:
    x = as_value(x)

    def factory(out):
        def _backward():
            x.grad += out.grad * (x.data > 0)
        return _backward

    return _node(np.maximum(x.data, 0.0), (x,), factory)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> DiffValue:
    x = as_value(x)

    def factory(out):
        def _backward():
            x.grad += out.grad * out.data * (1.0 - out.data)
        return _backward

    return _node(_sigmoid(x.data), (x,), factory)


def abs_(x) -> DiffValue:
    x = as_value(x)

    def factory(out):
        def _backward():
            x.grad += out.grad * np.sign(x.data)
        return _backward

    return _node(np.abs(x.data), (x,), factory)


# ---------------------------------------------------------------- structural

def matmul(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def factory(out):
        def _backward():
            if a.requires_grad:
                a.grad += out.grad @ b.data.T
            if b.requires_grad:
                b.grad += a.data.T @ out.grad
        return _backward

    return _node(a.data @ b.data, (a, b), factory)


def transpose(x) -> DiffValue:
    x = as_value(x)
    if x.ndim != 2:
        raise ShapeError("transpose expects a matrix")

    def factory(out):
        def _backward():
            x.grad += out.grad.T
        return _backward

    return _node(x.data.T, (x,), factory)


def reshape(x, shape) -> DiffValue:
    x = as_value(x)

    def factory(out):
        def _backward():
            x.grad += out.grad.reshape(x.shape)
        return _backward

    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _node(data, (x,), factory)


def sum_(x, axis=None, keepdims: bool = False) -> DiffValue:
    x = as_value(x)

    def factory(out):
        def _backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x.grad += np.broadcast_to(g, x.shape)
        return _backward

    return _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), factory)


def mean(x, axis=None, keepdims: bool = False) -> DiffValue:
    x = as_value(x)
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(values: Sequence, axis: int = -1) -> DiffValue:
    vals = [as_value(v) for v in values]
    try:
        data = np.concatenate([v.data for v in vals], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    sizes = [v.shape[axis] for v in vals]
    bounds = np.cumsum([0] + sizes)

    def factory(out):
        def _backward():
            for v, lo, hi in zip(vals, bounds[:-1], bounds[1:]):
                if v.requires_grad:
                    idx = [slice(None)] * out.grad.ndim
                    idx[axis] = slice(lo, hi)
                    v.grad += out.grad[tuple(idx)]
        return _backward

    return _node(data, tuple(vals), factory)


def take_rows(x, idx) -> DiffValue:
    """Gather rows ``x[idx]``; repeated indices accumulate in backward."""
    x = as_value(x)
    idx = np.asarray(idx, dtype=np.int64)

    def factory(out):
        def _backward():
            np.add.at(x.grad, idx, out.grad)
        return _backward

    return _node(x.data[idx], (x,), factory)


def take_cols(x, idx) -> DiffValue:
    x = as_value(x)
    idx = np.asarray(idx, dtype=np.int64)

    def factory(out):
        def _backward():
            np.add.at(x.grad, (slice(None), idx), out.grad)
        return _backward

    return _node(x.data[:, idx], (x,), factory)


def segment_mean(x, segment_ids, n_segments: int) -> DiffValue:
    """Row-wise mean of ``x`` grouped by ``segment_ids`` (empty segments give 0)."""
    x = as_value(x)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape[0] != x.shape[0]:
        raise ShapeError(f"segment_mean: {ids.shape[0]} ids for {x.shape[0]} rows")
    counts = np.bincount(ids, minlength=n_segments).astype(np.float64)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    data = np.zeros((n_segments,) + x.shape[1:])
    np.add.at(data, ids, x.data)
    data *= inv.reshape((-1,) + (1,) * (x.ndim - 1))

    def factory(out):
        def _backward():
            x.grad += (out.grad * inv.reshape((-1,) + (1,) * (x.ndim - 1)))[ids]
        return _backward

    return _node(data, (x,), factory)


# ---------------------------------------------------------------- normalisation

def softmax(x, axis: int = -1) -> DiffValue:
    x = as_value(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def factory(out):
        def _backward():
            g = out.grad
            x.grad += s * (g - (g * s).sum(axis=axis, keepdims=True))
        return _backward

    return _node(s, (x,), factory)


def log_softmax(x, axis: int = -1) -> DiffValue:
    x = as_value(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    ls = z - lse

    def factory(out):
        def _backward():
            g = out.grad
            x.grad += g - np.exp(ls) * g.sum(axis=axis, keepdims=True)
        return _backward

    return _node(ls, (x,), factory)


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> DiffValue:
    """Normalise over the last axis, then apply optional affine ``gamma``/``beta``."""
    x = as_value(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = x.shape[-1]

    def factory(out):
        def _backward():
            g = out.grad
            x.grad += inv * (g - g.mean(axis=-1, keepdims=True)
                             - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        return _backward

    normed = _node(xhat, (x,), factory)
    if gamma is not None:
        gamma = as_value(gamma)
        if gamma.shape[-1] != d:
            raise ShapeError("layer_norm gamma width mismatch")
        normed = mul(normed, gamma)
    if beta is not None:
        normed = add(normed, beta)
    return normed


# ---------------------------------------------------------------- composites

def linear(x, weight, bias=None) -> DiffValue:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def scaled_dot_attention(q, k, v, mask=None) -> DiffValue:
    """softmax(q k^T / sqrt(d) restricted to ``mask``) v.

    ``mask`` is a boolean (n_q, n_k) array; True marks keys a query may attend
    to.  Every row must allow at least one key.
    """
    q, k, v = as_value(q), as_value(k), as_value(v)
    if q.shape[-1] != k.shape[-1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention: q{q.shape} k{k.shape} v{v.shape}")
    logits = mul(matmul(q, transpose(k)), 1.0 / np.sqrt(q.shape[-1]))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != logits.shape:
            raise ShapeError(f"attention mask {mask.shape} vs logits {logits.shape}")
        if not mask.any(axis=1).all():
            raise ShapeError("attention mask has a row with no admissible key")
        # exp(-1e30 - max) underflows to exactly 0.0 in float64
        logits = add(logits, np.where(mask, 0.0, -1e30))
    return matmul(softmax(logits, axis=-1), v)


def cosine_similarity(u, v, eps: float = 1e-12) -> DiffValue:
    """Row-wise cosine similarity along the last axis."""
    u, v = as_value(u), as_value(v)
    _check_broadcast(u, v, "cosine_similarity")
    dot = sum_(mul(u, v), axis=-1)
    nu = sqrt(add(sum_(mul(u, u), axis=-1), eps))
    nv = sqrt(add(sum_(mul(v, v), axis=-1), eps))
    return div(dot, mul(nu, nv))


# ---------------------------------------------------------------- losses

def cross_entropy(logits, target) -> DiffValue:
    """Mean softmax cross-entropy; ``target`` holds integer class ids per row."""
    logits = as_value(logits)
    z = logits.data if logits.ndim == 2 else logits.data[None, :]
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if t.shape[0] != z.shape[0]:
        raise ShapeError(f"cross_entropy: {t.shape[0]} targets for {z.shape[0]} rows")
    if (t < 0).any() or (t >= z.shape[1]).any():
        raise ShapeError("cross_entropy: target out of range")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = (lse - z[rows, t]).mean()

    def factory(out):
        def _backward():
            p = np.exp(z - lse[:, None])
            p[rows, t] -= 1.0
            g = out.grad * p / z.shape[0]
            logits.grad += g.reshape(logits.shape)
        return _backward

    return _node(loss, (logits,), factory)


def _check_target(probs: DiffValue, target) -> np.ndarray:
    t = np.asarray(target, dtype=np.float64)
    if t.shape != probs.shape:
        raise ShapeError(f"target {t.shape} vs prediction {probs.shape}")
    return t


def binary_cross_entropy(probs, target, eps: float = 1e-12) -> DiffValue:
    """Mean BCE on probabilities (clipped to [eps, 1-eps])."""
    probs = as_value(probs)
    t = _check_target(probs, target)
    if (probs.data < 0).any() or (probs.data > 1).any():
        raise ValueError("binary_cross_entropy expects probabilities in [0, 1]")
    p = np.clip(probs.data, eps, 1 - eps)
    loss = -(t * np.log(p) + (1 - t) * np.log(1 - p)).mean()

    def factory(out):
        def _backward():
            g = (p - t) / (p * (1 - p)) / p.size
            probs.grad += out.grad * g
        return _backward

    return _node(loss, (probs,), factory)


def binary_cross_entropy_with_logits(logits, target) -> DiffValue:
    """Mean BCE evaluated from logits; stable for saturated predictions."""
    logits = as_value(logits)
    t = _check_target(logits, target)
    z = logits.data
    loss = (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean()

    def factory(out):
        def _backward():
            logits.grad += out.grad * (_sigmoid(z) - t) / z.size
        return _backward

    return _node(loss, (logits,), factory)


def dice_loss(probs, target, eps: float = 1e-6) -> DiffValue:
    """1 - (2|p.t| + eps) / (|p| + |t| + eps), averaged over rows for 2-D input."""
    probs = as_value(probs)
    t = _check_target(probs, target)
    p2 = probs.data if probs.ndim == 2 else probs.data[None, :]
    t2 = t if t.ndim == 2 else t[None, :]
    num = 2.0 * (p2 * t2).sum(axis=1) + eps
    den = p2.sum(axis=1) + t2.sum(axis=1) + eps
    loss = (1.0 - num / den).mean()

    def factory(out):
        def _backward():
            # d/dp of -num/den
            g = -(2.0 * t2 * den[:, None] - num[:, None]) / den[:, None] ** 2
            probs.grad += (out.grad * g / p2.shape[0]).reshape(probs.shape)
        return _backward

    return _node(loss, (probs,), factory)


def l1_loss(pred, target) -> DiffValue:
    pred = as_value(pred)
    t = _check_target(pred, target)
    return mean(abs_(sub(pred, t)))


def mse_loss(pred, target) -> DiffValue:
    pred = as_value(pred)
    t = _check_target(pred, target)
    d = sub(pred, t)
    return mean(mul(d, d))
