"""Numba-compiled convolution kernels.

Same contract as :mod:`oskt.numerics.kernels.conv_numpy`; selected by
default when numba imports cleanly.  GEMM-like reductions accumulate in
float64 and cast on store, which keeps the two backends within a few
ulps of each other in single precision.
"""

from __future__ import annotations

import numpy as np
from numba import njit

BACKEND_NAME = "numba"


@njit(cache=True)
def _pad_input(x, pad):
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    return xp


@njit(cache=True)
def conv2d_forward(x, w, stride, pad):
    b, cin, h, wdt = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wdt + 2 * pad - k) // stride + 1
    xp = _pad_input(x, pad) if pad > 0 else x
    out = np.empty((b, cout, ho, wo), dtype=x.dtype)
    for bi in range(b):
        for co in range(cout):
            for i in range(ho):
                hi = i * stride
                for j in range(wo):
                    wj = j * stride
                    acc = 0.0
                    for ci in range(cin):
                        for kh in range(k):
                            for kw in range(k):
                                acc += xp[bi, ci, hi + kh, wj + kw] * w[co, ci, kh, kw]
                    out[bi, co, i, j] = acc
    return out


@njit(cache=True)
def conv2d_backward_kernel(g, x, w_shape, stride, pad):
    b, cin, h, wdt = x.shape
    cout, _, k, _ = w_shape
    ho, wo = g.shape[2], g.shape[3]
    xp = _pad_input(x, pad) if pad > 0 else x
    dw = np.zeros((cout, cin, k, k), dtype=np.float64)
    for bi in range(b):
        for co in range(cout):
            for i in range(ho):
                hi = i * stride
                for j in range(wo):
                    gv = g[bi, co, i, j]
                    for ci in range(cin):
                        for kh in range(k):
                            for kw in range(k):
                                dw[co, ci, kh, kw] += gv * xp[bi, ci, hi + kh, j * stride + kw]
    return dw.astype(x.dtype)


@njit(cache=True)
def conv2d_backward_input(g, w, x_shape, stride, pad):
    b, cin, h, wdt = x_shape
    cout, _, k, _ = w.shape
    ho, wo = g.shape[2], g.shape[3]
    dxp = np.zeros((b, cin, h + 2 * pad, wdt + 2 * pad), dtype=g.dtype)
    for bi in range(b):
        for co in range(cout):
            for i in range(ho):
                hi = i * stride
                for j in range(wo):
                    gv = g[bi, co, i, j]
                    wj = j * stride
                    for ci in range(cin):
                        for kh in range(k):
                            for kw in range(k):
                                dxp[bi, ci, hi + kh, wj + kw] += gv * w[co, ci, kh, kw]
    if pad > 0:
        return np.ascontiguousarray(dxp[:, :, pad : pad + h, pad : pad + wdt])
    return dxp
