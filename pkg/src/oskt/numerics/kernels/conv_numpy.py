"""Pure-numpy convolution kernels (im2col / col2im formulation).

Fallback path used when numba is unavailable or when OSKT_BACKEND=numpy
is set.  Cross-correlation convention, NCHW layout, square kernels.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND_NAME = "numpy"


def _windows(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """All k*k patches of x: (B, Cin, Ho, Wo, k, k)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    wins = sliding_window_view(x, (k, k), axis=(2, 3))
    return wins[:, :, ::stride, ::stride]


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """x (B,Cin,H,W) cross-correlated with w (Cout,Cin,k,k) -> (B,Cout,Ho,Wo)."""
    k = w.shape[2]
    wins = _windows(x, k, stride, pad)
    # contract (Cin, kh, kw); tensordot lowers to a single GEMM
    out = np.tensordot(wins, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward_kernel(
    g: np.ndarray, x: np.ndarray, w_shape: tuple, stride: int, pad: int
) -> np.ndarray:
    """Gradient of sum(g * conv(x, w)) with respect to w."""
    k = w_shape[2]
    wins = _windows(x, k, stride, pad)
    # g (B,Cout,Ho,Wo) x wins (B,Cin,Ho,Wo,k,k) over (B,Ho,Wo)
    dw = np.tensordot(g, wins, axes=([0, 2, 3], [0, 2, 3]))
    return np.ascontiguousarray(dw.astype(x.dtype, copy=False))


def conv2d_backward_input(
    g: np.ndarray, w: np.ndarray, x_shape: tuple, stride: int, pad: int
) -> np.ndarray:
    """Gradient of sum(g * conv(x, w)) with respect to x."""
    b, cin, h, wdt = x_shape
    cout, _, k, _ = w.shape
    ho, wo = g.shape[2], g.shape[3]
    dxp = np.zeros((b, cin, h + 2 * pad, wdt + 2 * pad), dtype=g.dtype)
    for kh in range(k):
        for kw in range(k):
            # (B,Cout,Ho,Wo) x (Cout,Cin) -> (B,Ho,Wo,Cin)
            patch = np.tensordot(g, w[:, :, kh, kw], axes=([1], [0]))
            dxp[:, :, kh : kh + stride * ho : stride, kw : kw + stride * wo : stride] += (
                patch.transpose(0, 3, 1, 2)
            )
    if pad:
        dxp = dxp[:, :, pad : pad + h, pad : pad + wdt]
    return np.ascontiguousarray(dxp)
