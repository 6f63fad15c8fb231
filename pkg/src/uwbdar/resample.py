"""Separable resampling used for inputs, projection kernels and PEV grids.

Two rules, applied per axis:

* linear interpolation on a corner-aligned grid (output sample ``i`` sits at
  input position ``i * (n_in - 1) / (n_out - 1)``), used for up- and, in the
  naive baseline, down-sampling;
* area-weighted adaptive average pooling for shrinking kernels: output cell
  ``i`` averages the input over the continuous span
  ``[i * n_in / n_out, (i + 1) * n_in / n_out)``, with boundary bins weighted
  by their overlap.  Every input bin is covered with total weight
  ``n_out / n_in``, so the global mean is preserved exactly, and when
  ``n_out`` divides ``n_in`` this is the ordinary block mean.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

__all__ = [
    "linear_taps",
    "linear_matrix",
    "area_matrix",
    "kernel_matrix",
    "resize_bilinear",
    "resize_separable",
]


@lru_cache(maxsize=256)
def linear_taps(n_in: int, n_out: int):
    """``(lo, hi, w)`` with ``out[i] = (1 - w[i]) * x[lo[i]] + w[i] * x[hi[i]]``."""
    if n_in < 1 or n_out < 1:
        raise ValueError(f"sizes must be >= 1, got {n_in} -> {n_out}")
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    w = pos - lo
    for a in (lo, hi, w):
        a.setflags(write=False)
    return lo, hi, w


def linear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense ``(n_out, n_in)`` corner-aligned linear interpolation operator."""
    lo, hi, w = linear_taps(n_in, n_out)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    m[rows, lo] += 1.0 - w
    m[rows, hi] += w
    return m


def area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense ``(n_out, n_in)`` area-weighted average pooling operator (``n_out <= n_in``)."""
    if not 1 <= n_out <= n_in:
        raise ValueError(f"area pooling needs 1 <= n_out <= n_in, got {n_in} -> {n_out}")
    # integer arithmetic on a grid refined by n_out keeps the weights exact
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        a, b = i * n_in, (i + 1) * n_in  # span in units of 1/n_out input bins
        for j in range(a // n_out, -(-b // n_out)):
            overlap = min(b, (j + 1) * n_out) - max(a, j * n_out)
            if overlap > 0:
                m[i, j] = overlap / n_in
    return m


def kernel_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Per-axis kernel resizing rule: identity, interpolation (grow) or pooling (shrink)."""
    if n_out == n_in:
        return np.eye(n_in)
    if n_out > n_in:
        return linear_matrix(n_in, n_out)
    return area_matrix(n_in, n_out)


def resize_separable(x: np.ndarray, rows_op: np.ndarray, cols_op: np.ndarray) -> np.ndarray:
    """Apply ``rows_op @ x @ cols_op.T`` over the last two axes."""
    return np.matmul(np.matmul(rows_op, x), cols_op.T)


def _resize_axis(x, n_out, axis):
    n_in = x.shape[axis]
    if n_in == n_out:
        return x
    lo, hi, w = linear_taps(n_in, n_out)
    shape = [1] * x.ndim
    shape[axis] = n_out
    w = w.reshape(shape).astype(x.dtype, copy=False)
    a = np.take(x, lo, axis=axis)
    b = np.take(x, hi, axis=axis)
    return a + w * (b - a)


def resize_bilinear(x: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resize of the last two axes; dtype is preserved.

    Equal shapes return an exact copy.
    """
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    r, c = int(out_shape[0]), int(out_shape[1])
    if x.shape[-2:] == (r, c):
        return x.copy()
    # shrink-first ordering keeps the intermediate small
    if r * x.shape[-1] <= x.shape[-2] * c:
        y = _resize_axis(x, r, x.ndim - 2)
        return _resize_axis(y, c, x.ndim - 1)
    y = _resize_axis(x, c, x.ndim - 1)
    return _resize_axis(y, r, x.ndim - 2)
