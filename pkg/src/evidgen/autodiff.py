"""Minimal reverse-mode autodiff over numpy arrays.

Just enough machinery for a transformer encoder-decoder: tensors wrap
ndarrays, ops build a graph of closures, and ``backward()`` on a scalar
walks the graph in reverse topological order. Matrix products run on
numpy/BLAS; normalization, softmax, GELU, and cross-entropy go through
the kernels package so the compiled and pure backends share one graph.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

from . import kernels

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An ndarray plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def param(data) -> Tensor:
    """Wrap an array as a trainable leaf."""
    return Tensor(np.asarray(data), requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=False)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad += g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn)
    return Tensor(data)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def backward(g):
        _accum(a, g * s)

    return _make(out, (a,), backward)


def mul_const(a: Tensor, c) -> Tensor:
    """Elementwise product with a non-differentiable array."""
    c = np.asarray(c, dtype=a.data.dtype)
    out = a.data * c

    def backward(g):
        _accum(a, _unbroadcast(g * c, a.data.shape))

    return _make(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data

    def backward(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _make(out, (a, b), backward)


def transpose(a: Tensor, axes: Iterable[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)

    def backward(g):
        _accum(a, np.transpose(g, inverse))

    return _make(out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = a.data.shape
    out = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(orig))

    return _make(out, (a,), backward)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    out = a.data.sum(axis=axis)

    def backward(g):
        _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

    return _make(out, (a,), backward)


def take(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0 (indices may repeat)."""
    indices = np.asarray(indices, dtype=np.int64)
    out = a.data[indices]

    def backward(g):
        if not a.requires_grad:
            return
        da = np.zeros_like(a.data)
        np.add.at(da, indices, g)
        _accum(a, da)

    return _make(out, (a,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def backward(g):
        if not table.requires_grad:
            return
        dtable = np.zeros_like(table.data)
        np.add.at(dtable, ids, g)
        _accum(table, dtable)

    return _make(out, (table,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer norm over the last axis; x may have any leading shape."""
    orig = x.data.shape
    x2d = np.ascontiguousarray(x.data.reshape(-1, orig[-1]))
    y, mean, rstd = kernels.layer_norm_fwd(x2d, gamma.data, beta.data, eps)

    def backward(g):
        g2d = np.ascontiguousarray(g.reshape(-1, orig[-1]))
        dx, dgamma, dbeta = kernels.layer_norm_bwd(g2d, x2d, gamma.data, mean, rstd)
        _accum(x, dx.reshape(orig))
        _accum(gamma, dgamma)
        _accum(beta, dbeta)

    return _make(y.reshape(orig), (x, gamma, beta), backward)


def gelu(x: Tensor) -> Tensor:
    flat = np.ascontiguousarray(x.data.reshape(-1))
    y = kernels.gelu_fwd(flat)

    def backward(g):
        dx = kernels.gelu_bwd(np.ascontiguousarray(g.reshape(-1)), flat)
        _accum(x, dx.reshape(x.data.shape))

    return _make(y.reshape(x.data.shape), (x,), backward)


def masked_softmax(scores: Tensor, key_mask: np.ndarray | None, causal: bool, heads: int) -> Tensor:
    """Attention softmax over the last axis of (rows, Tq, Tk) scores.

    ``key_mask`` has shape (batch, Tk) where rows // heads == batch;
    zeros mark padding keys and receive exactly zero probability.
    """
    if key_mask is None:
        batch = scores.data.shape[0] // heads
        key_mask = np.ones((batch, scores.data.shape[2]), dtype=scores.data.dtype)
    else:
        key_mask = np.ascontiguousarray(key_mask, dtype=scores.data.dtype)
    probs = kernels.attn_softmax_fwd(np.ascontiguousarray(scores.data), key_mask, causal, heads)

    def backward(g):
        _accum(scores, kernels.attn_softmax_bwd(np.ascontiguousarray(g), probs))

    return _make(probs, (scores,), backward)


def softmax_xent(logits: Tensor, targets: np.ndarray, scales: np.ndarray):
    """Weighted sum of per-row cross-entropy losses.

    Returns (scalar Tensor, per-row loss ndarray). ``scales`` weights
    each row; set a row's scale to 0 to ignore it (its target must
    still be a valid index).
    """
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    scales = np.asarray(scales, dtype=logits.data.dtype)
    losses, probs = kernels.softmax_xent_fwd(np.ascontiguousarray(logits.data), targets)
    total = np.asarray((losses.astype(np.float64) * scales.astype(np.float64)).sum(), dtype=logits.data.dtype)

    def backward(g):
        scaled = np.ascontiguousarray(scales * logits.data.dtype.type(g))
        _accum(logits, kernels.softmax_xent_bwd(probs, targets, scaled))

    out = _make(total, (logits,), backward)
    return out, losses
