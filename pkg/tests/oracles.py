"""Slow, independent reference implementations used only by the tests.

Nothing here calls numpy.fft, the package's resampling operators or its
layer primitives; loops and textbook formulas only.
"""
from __future__ import annotations

import cmath
import math

import numpy as np


def naive_dft(x):
    """O(n^2) DFT along the first axis."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[0]
    w = np.array([[cmath.exp(-2j * math.pi * j * k / n) for j in range(n)] for k in range(n)])
    return np.tensordot(w, x, axes=(1, 0))


def bilinear_point(a, y, x):
    """Value of a 2-D grid at fractional position (y, x)."""
    h, w = a.shape
    y0 = min(int(math.floor(y)), h - 1)
    x0 = min(int(math.floor(x)), w - 1)
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    top = (1 - fx) * a[y0, x0] + fx * a[y0, x1]
    bot = (1 - fx) * a[y1, x0] + fx * a[y1, x1]
    return (1 - fy) * top + fy * bot


def bilinear_resize(a, out_shape):
    """Corner-aligned bilinear resize by direct evaluation at every output point."""
    a = np.asarray(a, dtype=np.float64)
    h, w = a.shape
    oh, ow = out_shape
    out = np.empty((oh, ow))
    for i in range(oh):
        y = 0.0 if oh == 1 else i * (h - 1) / (oh - 1)
        for j in range(ow):
            x = 0.0 if ow == 1 else j * (w - 1) / (ow - 1)
            out[i, j] = bilinear_point(a, y, x)
    return out


def block_pool(a, k):
    """Mean of each (n/k x n/k) block; requires k | n."""
    n = a.shape[0]
    s = n // k
    out = np.empty((k, k))
    for i in range(k):
        for j in range(k):
            total = 0.0
            for u in range(i * s, (i + 1) * s):
                for v in range(j * s, (j + 1) * s):
                    total += a[u, v]
            out[i, j] = total / (s * s)
    return out


# --- transformer pieces, written out token by token --------------------------


def ln(v, g, b, eps=1e-6):
    mu = sum(v) / len(v)
    var = sum((t - mu) ** 2 for t in v) / len(v)
    return np.array([(t - mu) / math.sqrt(var + eps) for t in v]) * g + b


def gelu(u):
    return 0.5 * u * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (u + 0.044715 * u**3)))


def encoder_reference(tokens, enc, layers, heads):
    """Pre-norm transformer blocks evaluated one token and one head at a time."""
    x = [np.array(t, dtype=np.float64) for t in tokens]
    t_n = len(x)
    d = x[0].size
    dh = d // heads
    for l in range(layers):
        p = lambda name: enc[f"enc.{l}.{name}"]  # noqa: E731
        a = [ln(v, p("ln1.g"), p("ln1.b")) for v in x]
        qkv = [v @ p("attn.wqkv") + p("attn.bqkv") for v in a]
        ctx = [np.zeros(d) for _ in range(t_n)]
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            q = [r[0:d][sl] for r in qkv]
            k = [r[d:2 * d][sl] for r in qkv]
            v = [r[2 * d:][sl] for r in qkv]
            for i in range(t_n):
                scores = [float(q[i] @ k[j]) / math.sqrt(dh) for j in range(t_n)]
                m = max(scores)
                e = [math.exp(s - m) for s in scores]
                z = sum(e)
                ctx[i][sl] = sum((e[j] / z) * v[j] for j in range(t_n))
        x = [x[i] + ctx[i] @ p("attn.wo") + p("attn.bo") for i in range(t_n)]
        x = [v + gelu(ln(v, p("ln2.g"), p("ln2.b")) @ p("mlp.w1") + p("mlp.b1")) @ p("mlp.w2") + p("mlp.b2")
             for v in x]
    return x[0]


def freq_reference(m, weights, layers):
    """Centred map, block convolutions as explicit loops, global mean."""
    m = np.asarray(m, dtype=np.float64)
    h = (m - m.mean())[:, :, None]
    for j, (kh, kw, cout) in enumerate(layers):
        w = weights[f"freq.conv{j}.w"]
        b = weights[f"freq.conv{j}.b"]
        ho, wo = h.shape[0] // kh, h.shape[1] // kw
        cin = h.shape[2]
        nxt = np.empty((ho, wo, cout))
        for r in range(ho):
            for c in range(wo):
                vec = []
                for u in range(kh):
                    for v in range(kw):
                        for ch in range(cin):
                            vec.append(h[r * kh + u, c * kw + v, ch])
                nxt[r, c] = gelu(np.array(vec) @ w + b)
        h = nxt
    return h.mean(axis=(0, 1))


def head_reference(z, classifier):
    n = 0
    while f"head.{n}.w" in classifier:
        n += 1
    h = np.asarray(z, dtype=np.float64)
    for j in range(n):
        h = h @ classifier[f"head.{j}.w"] + classifier[f"head.{j}.b"]
        if j < n - 1:
            h = gelu(h)
    return h


def finite_difference_check(model, inputs, labels, picks, h=1e-4, floor=1e-6):
    """Central differences of ``model.loss_and_grads`` at ``picks`` = [(name, flat_index)].

    Returns ``(max_relative_error, rows)``; the relative error is
    ``|a - n| / max(|a| + |n|, floor)`` so that parameters with vanishing
    gradients do not divide by zero.
    """
    _, grads = model.loss_and_grads(inputs, labels)
    rows = []
    worst = 0.0
    for name, idx in picks:
        p = model.params[name]
        at = np.unravel_index(idx, p.shape)  # in place; reshape may copy
        keep = p[at]
        p[at] = keep + h
        up, _ = model.loss_and_grads(inputs, labels)
        p[at] = keep - h
        down, _ = model.loss_and_grads(inputs, labels)
        p[at] = keep
        num = (up - down) / (2 * h)
        ana = float(grads[name][at])
        err = abs(ana - num) / max(abs(ana) + abs(num), floor)
        worst = max(worst, err)
        rows.append((name, idx, ana, num, err))
    return worst, rows
