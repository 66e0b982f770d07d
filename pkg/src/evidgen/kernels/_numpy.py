"""Pure-numpy reference implementations of the hot kernels.

Shapes follow the conventions of the ops layer: row-major contiguous
arrays, attention scores flattened to (batch*heads, Tq, Tk), key masks
per batch row (batch, Tk) with 1.0 = attendable.
"""

from __future__ import annotations

import math

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def layer_norm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1)
    var = x.var(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    return xhat * gamma + beta, mean, rstd


def layer_norm_bwd(dy, x, gamma, mean, rstd):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, dgamma, dbeta


def attn_softmax_fwd(scores, key_mask, causal, heads):
    n_rows, tq, tk = scores.shape
    batch = n_rows // heads
    s = scores.reshape(batch, heads, tq, tk)
    neg = np.array(-np.inf, dtype=scores.dtype)
    s = np.where(key_mask.reshape(batch, 1, 1, tk) > 0, s, neg)
    if causal:
        s = np.where(np.tril(np.ones((tq, tk), dtype=bool)), s, neg)
    mx = s.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0)
    e = np.exp(s - mx)
    denom = e.sum(axis=-1, keepdims=True)
    denom = np.where(denom == 0, 1, denom)
    return (e / denom).reshape(n_rows, tq, tk)


def attn_softmax_bwd(dprobs, probs):
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


def gelu_fwd(x):
    u = _GELU_C * (x + _GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_bwd(dy, x):
    x2 = x * x
    u = _GELU_C * (x + _GELU_A * x * x2)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax_xent_fwd(logits, targets):
    rows = np.arange(logits.shape[0])
    mx = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - mx)
    z = e.sum(axis=1, keepdims=True)
    probs = e / z
    losses = np.log(z).ravel() + mx.ravel() - logits[rows, targets]
    return losses, probs


def softmax_xent_bwd(probs, targets, scales):
    d = probs * scales[:, None]
    d[np.arange(probs.shape[0]), targets] -= scales
    return d
