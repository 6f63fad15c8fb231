"""Minimal numpy layers with hand-written backward passes.

Every layer is a pair ``f(x, ...) -> (y, cache)`` / ``f_backward(dy, cache)``.
Matrix products go through :func:`matmul` so that an optional counter can
record the multiply-accumulate work actually performed.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

__all__ = [
    "matmul",
    "count_macs",
    "linear",
    "linear_backward",
    "layernorm",
    "layernorm_backward",
    "gelu",
    "gelu_backward",
    "attention",
    "attention_backward",
    "softmax",
    "softmax_xent",
    "Adam",
]


class _Counter:
    def __init__(self):
        self.macs = 0


_active: list[_Counter] = []


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``np.matmul`` that reports its multiply-accumulate count to any open counter."""
    out = np.matmul(a, b)
    if _active:
        # out has shape (..., m, n); the contraction length is a.shape[-1]
        n = out.size * a.shape[-1]
        for c in _active:
            c.macs += int(n)
    return out


@contextlib.contextmanager
def count_macs():
    """Context manager yielding a counter whose ``macs`` field accumulates matmul work."""
    c = _Counter()
    _active.append(c)
    try:
        yield c
    finally:
        _active.remove(c)


# ---------------------------------------------------------------------------


def linear(x, w, b):
    return matmul(x, w) + b, x


def linear_backward(dy, x, w):
    """Returns ``(dx, dw, db)``; leading axes of ``x`` are summed for the weight grads."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = matmul(x2.T, dy2)
    db = dy2.sum(axis=0)
    dx = matmul(dy, w.T)
    return dx, dw, db


def layernorm(x, g, b, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layernorm_backward(dy, cache):
    xhat, rstd, g = cache
    lead = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=lead)
    db = dy.sum(axis=lead)
    dxhat = dy * g
    n = xhat.shape[-1]
    dx = rstd / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    return dx, dg, db


_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh approximation of GELU."""
    x2 = x * x
    t = np.tanh(_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    du = _C * (1.0 + 0.134145 * (x * x))
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def attention(x, wqkv, bqkv, wo, bo, heads):
    """Multi-head self-attention over ``x`` of shape ``(B, T, d)``."""
    bsz, t, d = x.shape
    dh = d // heads
    qkv = matmul(x, wqkv) + bqkv  # (B, T, 3d)
    qkv = qkv.reshape(bsz, t, 3, heads, dh).transpose(2, 0, 3, 1, 4)  # (3, B, h, T, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scale = 1.0 / math.sqrt(dh)
    p = softmax(matmul(q, k.transpose(0, 1, 3, 2)) * scale)  # (B, h, T, T)
    o = matmul(p, v)  # (B, h, T, dh)
    o2 = o.transpose(0, 2, 1, 3).reshape(bsz, t, d)
    y = matmul(o2, wo) + bo
    return y, (x, q, k, v, p, o2, heads, scale)


def attention_backward(dy, cache, wqkv, wo):
    """Returns ``(dx, dwqkv, dbqkv, dwo, dbo)``."""
    x, q, k, v, p, o2, heads, scale = cache
    bsz, t, d = x.shape
    dh = d // heads
    do2, dwo, dbo = linear_backward(dy, o2, wo)
    do = do2.reshape(bsz, t, heads, dh).transpose(0, 2, 1, 3)
    dp = matmul(do, v.transpose(0, 1, 3, 2))
    dv = matmul(p.transpose(0, 1, 3, 2), do)
    ds = p * (dp - (dp * p).sum(-1, keepdims=True)) * scale
    dq = matmul(ds, k)
    dk = matmul(ds.transpose(0, 1, 3, 2), q)
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(bsz, t, 3 * d)
    dx, dwqkv, dbqkv = linear_backward(dqkv, x, wqkv)
    return dx, dwqkv, dbqkv, dwo, dbo


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return float(loss), g / n


class Adam:
    """Adam over a dict of arrays (bias-corrected, no weight decay)."""

    def __init__(self, lr=1e-4, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, lr_scale: dict | None = None):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            lr = self.lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
            params[name] -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[name].dtype, copy=False)
